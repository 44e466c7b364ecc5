"""Synthesis of the autonomous hardware behind channels and instruments.

A channel with m Kraus operators becomes a unitary on system (x) ancilla
acting on a fixed pure ancilla reference state; an instrument additionally
gets a projective resolution on the ancilla whose blocks group Kraus
indices by outcome.  The classical memory is two registers per step: an
informational one that records the outcome and a degenerate, maximally
mixed one that dephases it at zero energy cost.

Factor order conventions: dilation unitaries act on (system, ancilla);
the outcome-recording unitary acts on (ancilla, memory); the dephasing
unitary acts on (memory, dephaser).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .algebra import dagger, max_norm, ptrace_factors
from .channels import CPMap, Instrument
from .tolerances import DEFAULT

__all__ = [
    "DilationResult",
    "MemoryLayout",
    "dilate_channel",
    "dilate_instrument",
    "measurement_unitary",
    "dephasing_unitary",
    "apply_dilated",
    "instrument_from_dilation",
    "shift_matrix",
]


@dataclass(frozen=True, eq=False)
class DilationResult:
    """Unitary model of a channel or instrument.

    ``unitary`` acts on system (x) ancilla with the system factor first;
    ``projectors`` (instruments only) resolve the ancilla identity, one
    orthogonal block per outcome.
    """

    system_dim: int
    ancilla_dim: int
    ancilla_state: np.ndarray
    unitary: np.ndarray
    projectors: tuple[np.ndarray, ...] | None = None
    outcome_labels: tuple[str, ...] | None = None

    def unitarity_residual(self) -> float:
        u = self.unitary
        return max_norm(dagger(u) @ u - np.eye(u.shape[0]))


def _completion(isometry: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the isometry range."""
    u, _, _ = np.linalg.svd(isometry, full_matrices=True)
    return u[:, isometry.shape[1]:]


def _stinespring_unitary(kraus: Sequence[np.ndarray], d_anc: int) -> np.ndarray:
    """Unitary with U(|psi> (x) |0>) = sum_i (K_i|psi>) (x) |i>."""
    d = kraus[0].shape[0]
    big = d * d_anc
    isometry = np.zeros((big, d), dtype=complex)
    for i, k in enumerate(kraus):
        # row index (s, a) = s*d_anc + a
        isometry[i::d_anc, :] = k
    res = max_norm(dagger(isometry) @ isometry - np.eye(d))
    if res > DEFAULT.kraus_tp:
        raise ValueError(f"Kraus completeness violated: residual {res:.3e}")
    u = np.zeros((big, big), dtype=complex)
    u[:, 0::d_anc] = isometry          # columns hit by |psi> (x) |0>
    rest = _completion(isometry)
    cols = [s * d_anc + a for s in range(d) for a in range(1, d_anc)]
    for j, c in enumerate(cols):
        u[:, c] = rest[:, j]
    return u


def dilate_channel(channel: CPMap, ancilla_dim: int | None = None) -> DilationResult:
    """Minimal unitary dilation: ancilla dimension = number of Kraus terms.

    ``ancilla_dim`` may pad the ancilla beyond the minimal size; the extra
    directions never acquire amplitude.
    """
    m = len(channel.kraus)
    d_anc = m if ancilla_dim is None else int(ancilla_dim)
    if d_anc < m:
        raise ValueError(f"ancilla of dimension {d_anc} cannot host {m} Kraus terms")
    d = channel.dim
    u = _stinespring_unitary(channel.kraus, d_anc)
    ref = np.zeros((d_anc, d_anc), dtype=complex)
    ref[0, 0] = 1.0
    return DilationResult(d, d_anc, ref, u)


def dilate_instrument(inst: Instrument, ancilla_dim: int | None = None) -> DilationResult:
    """Dilation with ancilla projectors grouping Kraus indices by outcome.

    Reading the ancilla in the projective resolution and keeping block r
    reproduces the outcome-r map exactly; summing over outcomes recovers the
    channel dilation.  Padded ancilla directions are absorbed into the last
    outcome's projector so the resolution stays complete.
    """
    kraus = []
    groups: list[tuple[str, list[int]]] = []
    for label, cp in inst.outcomes:
        if not cp.kraus:
            raise ValueError(f"outcome {label!r} has an empty Kraus list")
        idx = list(range(len(kraus), len(kraus) + len(cp.kraus)))
        groups.append((label, idx))
        kraus.extend(cp.kraus)
    m = len(kraus)
    d_anc = m if ancilla_dim is None else int(ancilla_dim)
    base = dilate_channel(CPMap(inst.support, kraus), d_anc)
    projectors = []
    for g, (label, idx) in enumerate(groups):
        if g == len(groups) - 1:
            idx = idx + list(range(m, d_anc))
        p = np.zeros((d_anc, d_anc), dtype=complex)
        for i in idx:
            p[i, i] = 1.0
        projectors.append(p)
    return DilationResult(base.system_dim, d_anc, base.ancilla_state, base.unitary,
                          tuple(projectors), inst.labels)


def apply_dilated(dr: DilationResult, rho_s: np.ndarray,
                  outcome: int | None = None) -> np.ndarray:
    """Reduced action of the dilation: tr_anc{P U (rho (x) ref) U' P}.

    ``outcome`` selects a projector block (None for the unconditional
    channel).  Returns the unnormalized system state.
    """
    joint = np.kron(rho_s, dr.ancilla_state)
    out = dr.unitary @ joint @ dagger(dr.unitary)
    if outcome is not None:
        if dr.projectors is None:
            raise ValueError("channel dilation has no projective resolution")
        p = np.kron(np.eye(dr.system_dim), dr.projectors[outcome])
        out = p @ out @ p
    return ptrace_factors(out, [dr.system_dim, dr.ancilla_dim], [0])


def instrument_from_dilation(unitary: np.ndarray, ancilla_state: np.ndarray,
                             projectors: Sequence[np.ndarray],
                             system_dim: int,
                             labels: Sequence[str] | None = None,
                             support: Sequence[str] = ("S",),
                             weight_floor: float = 1e-14) -> Instrument:
    """Kraus form of the instrument realized by declared hardware.

    With the ancilla prepared in a mixed state sum_j lam_j |x_j><x_j|,
    the outcome-r Kraus operators are sqrt(lam_j) <a_i| P(r) U |x_j>, one
    per retained eigenvector j and readout basis index i.
    """
    d_anc = ancilla_state.shape[0]
    lam, chi = np.linalg.eigh(np.asarray(ancilla_state, dtype=complex))
    blocks = np.asarray(unitary, dtype=complex).reshape(
        system_dim, d_anc, system_dim, d_anc)
    outcomes = []
    for r, p in enumerate(projectors):
        # row (s, a), column (t, b):  [(1 (x) P_r) U]  then contract the
        # ancilla input leg with each retained eigenvector of its state
        pu = np.einsum("ac,sctb->satb", np.asarray(p, dtype=complex), blocks)
        contracted = np.einsum("satb,bj->satj", pu, chi)
        kraus = []
        for j in range(d_anc):
            if lam[j] < weight_floor:
                continue
            root = np.sqrt(lam[j])
            for i in range(d_anc):
                k = root * contracted[:, i, :, j]
                if np.max(np.abs(k)) > weight_floor:
                    kraus.append(k)
        if not kraus:
            kraus = [np.zeros((system_dim, system_dim), dtype=complex)]
        label = str(r + 1) if labels is None else str(labels[r])
        outcomes.append((label, CPMap(tuple(support), kraus)))
    return Instrument(outcomes)


def shift_matrix(d: int, r: int) -> np.ndarray:
    """Cyclic shift |i> -> |i + r mod d>."""
    s = np.zeros((d, d), dtype=complex)
    for i in range(d):
        s[(i + r) % d, i] = 1.0
    return s


def measurement_unitary(projectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outcome-recording unitary on ancilla (x) memory register.

    U = sum_r P(r) (x) shift_r; acting on rho' (x) |0><0| it writes the
    outcome into the register while keeping all cross terms:
    sum_{r,r'} P(r) rho' P(r') (x) |r><r'|.
    """
    projectors = [np.asarray(p, dtype=complex) for p in projectors]
    d_anc = projectors[0].shape[0]
    d_out = len(projectors)
    total = sum(projectors)
    if max_norm(total - np.eye(d_anc)) > 1e-12:
        raise ValueError("projectors do not resolve the ancilla identity")
    for i, p in enumerate(projectors):
        for j, q in enumerate(projectors):
            expect = p if i == j else np.zeros_like(p)
            if max_norm(p @ q - expect) > 1e-12:
                raise ValueError("projector blocks are not orthogonal")
    u = np.zeros((d_anc * d_out, d_anc * d_out), dtype=complex)
    for r, p in enumerate(projectors):
        u += np.kron(p, shift_matrix(d_out, r))
    return u


def dephasing_unitary(d: int) -> np.ndarray:
    """Conditional-shift unitary on memory (x) dephaser, both of dimension d.

    U = sum_r |r><r| (x) shift_r.  With the dephaser maximally mixed,
    tracing it out after conjugation leaves sum_r |r><r| rho |r><r|; with
    degenerate register energies the unitary commutes with the bare
    Hamiltonian, so the operation costs no energy.
    """
    u = np.zeros((d * d, d * d), dtype=complex)
    for r in range(d):
        ket = np.zeros((d, d), dtype=complex)
        ket[r, r] = 1.0
        u += np.kron(ket, shift_matrix(d, r))
    return u


def dephase(rho_mem: np.ndarray) -> np.ndarray:
    """Reduced action of the dephasing unitary on the memory register."""
    d = rho_mem.shape[0]
    joint = np.kron(rho_mem, np.eye(d) / d)
    u = dephasing_unitary(d)
    return ptrace_factors(u @ joint @ dagger(u), [d, d], [0])


@dataclass(frozen=True, eq=False)
class MemoryLayout:
    """Classical memory registers for a measurement schedule.

    One informational register per step (dimension = outcome count, starts
    in the first basis state) paired with a degenerate dephasing register of
    the same dimension in the maximally mixed state.  ``level`` is the
    common energy of the degenerate register states.
    """

    outcome_counts: tuple[int, ...]
    level: float = 0.0

    def __init__(self, outcome_counts: Sequence[int], level: float = 0.0):
        counts = tuple(int(d) for d in outcome_counts)
        if any(d < 1 for d in counts):
            raise ValueError("outcome counts must be positive")
        object.__setattr__(self, "outcome_counts", counts)
        object.__setattr__(self, "level", float(level))

    def register_dim(self, k: int) -> int:
        return self.outcome_counts[k]

    def idf_initial(self, k: int) -> np.ndarray:
        d = self.outcome_counts[k]
        rho = np.zeros((d, d), dtype=complex)
        rho[0, 0] = 1.0
        return rho

    def nidf_initial(self, k: int) -> np.ndarray:
        d = self.outcome_counts[k]
        return np.eye(d, dtype=complex) / d

    def h_register(self, k: int) -> np.ndarray:
        return self.level * np.eye(self.outcome_counts[k], dtype=complex)
