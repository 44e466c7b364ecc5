"""Completely positive maps, instruments, and direct evaluation of the
multi-time process on the system-bath space.

An intervention sequence applied at scheduled times, interleaved with
unitary system-bath evolution, maps to the final unnormalized system state;
the probability of the outcome record is the trace of that state.  The
evaluation here is the direct route; the autonomous reconstruction lives in
:mod:`proctherm.simulate` and must agree with it branch by branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .algebra import (
    DensityOperator,
    FactorRegistry,
    OperatorMatrix,
    dagger,
    embed_factors,
    expm_herm,
    max_norm,
)
from .protocol import Protocol
from .tolerances import DEFAULT

__all__ = [
    "CPMap",
    "KrausChannel",
    "Instrument",
    "InterventionSchedule",
    "apply_cp",
    "evaluate_process_tensor",
    "multilinearity_check",
    "mix_cp",
]


@dataclass(frozen=True, eq=False)
class CPMap:
    """Completely positive map in Kraus form, acting on labelled factors."""

    support: tuple[str, ...]
    kraus: tuple[np.ndarray, ...]

    def __init__(self, support: Iterable[str], kraus: Sequence[np.ndarray]):
        support = tuple(support)
        kraus = tuple(np.asarray(k, dtype=complex) for k in kraus)
        if not kraus:
            raise ValueError("a CP map needs at least one Kraus operator")
        d = kraus[0].shape[0]
        for k in kraus:
            if k.shape != (d, d):
                raise ValueError("Kraus operators must be square and equal-sized")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "kraus", kraus)

    @property
    def dim(self) -> int:
        return self.kraus[0].shape[0]

    def kraus_sum(self) -> np.ndarray:
        """sum_i K_i' K_i; equals the identity for a trace-preserving map."""
        return sum(dagger(k) @ k for k in self.kraus)

    def tp_residual(self) -> float:
        return max_norm(self.kraus_sum() - np.eye(self.dim))

    def choi(self) -> np.ndarray:
        """Choi matrix sum_i |K_i>><<K_i| (row-major vectorization)."""
        vecs = [k.reshape(-1) for k in self.kraus]
        return sum(np.outer(v, v.conj()) for v in vecs)

    def is_cp(self, tol: float = DEFAULT.choi_psd) -> bool:
        # Kraus form is CP by construction; the Choi check guards corrupted input
        return float(np.linalg.eigvalsh(self.choi())[0]) >= -tol

    def apply_mat(self, mat: np.ndarray, dims: Sequence[int],
                  positions: Sequence[int]) -> np.ndarray:
        """Apply to a matrix on a larger space; ``positions`` locate the
        support factors inside ``dims``."""
        ops = [embed_factors(k, positions, dims) for k in self.kraus]
        return sum(k @ mat @ dagger(k) for k in ops)

    def scaled(self, c: float) -> "CPMap":
        return CPMap(self.support, tuple(np.sqrt(c) * k for k in self.kraus))


def mix_cp(a: CPMap, b: CPMap, alpha: float) -> CPMap:
    """Convex mixture alpha*a + (1-alpha)*b as a single CP map."""
    if a.support != b.support:
        raise ValueError("can only mix maps on the same support")
    return CPMap(a.support, a.scaled(alpha).kraus + b.scaled(1 - alpha).kraus)


class KrausChannel(CPMap):
    """Trace-preserving CP map; the validity check runs at construction."""

    def __init__(self, support, kraus, tol: float = DEFAULT.kraus_tp):
        super().__init__(support, kraus)
        res = self.tp_residual()
        if res > tol:
            raise ValueError(f"Kraus completeness violated: residual {res:.3e}")


def apply_cp(cp_map: CPMap, rho: DensityOperator) -> DensityOperator:
    """rho -> sum_i K_i rho K_i', unnormalized; the trace is the weight."""
    if not set(cp_map.support) <= set(rho.support):
        raise ValueError(f"map support {cp_map.support} not within state "
                         f"support {rho.support}")
    reg = rho.op.registry
    dims = reg.dims(rho.support)
    positions = [rho.support.index(l) for l in reg.canonical(cp_map.support)]
    out = cp_map.apply_mat(rho.mat, dims, positions)
    return DensityOperator(OperatorMatrix(reg, rho.support, out))


@dataclass(frozen=True, eq=False)
class Instrument:
    """Outcome-labelled family of CP maps summing to a channel."""

    outcomes: tuple[tuple[str, CPMap], ...]

    def __init__(self, outcomes: Sequence[tuple[str, CPMap]],
                 tol: float = DEFAULT.kraus_tp):
        outcomes = tuple((str(label), cp) for label, cp in outcomes)
        if not outcomes:
            raise ValueError("an instrument needs at least one outcome")
        labels = [l for l, _ in outcomes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate outcome labels {labels}")
        supports = {cp.support for _, cp in outcomes}
        if len(supports) != 1:
            raise ValueError("all outcome maps must share one support")
        object.__setattr__(self, "outcomes", outcomes)
        res = self.average().tp_residual()
        if res > tol:
            raise ValueError(f"instrument is not trace-preserving on average: "
                             f"residual {res:.3e}")

    @property
    def support(self) -> tuple[str, ...]:
        return self.outcomes[0][1].support

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.outcomes)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    def cp_map(self, label: str) -> CPMap:
        for l, cp in self.outcomes:
            if l == label:
                return cp
        raise KeyError(f"unknown outcome label {label!r}")

    def average(self) -> CPMap:
        kraus = tuple(k for _, cp in self.outcomes for k in cp.kraus)
        return CPMap(self.support, kraus)

    def kraus_count(self) -> int:
        return sum(len(cp.kraus) for _, cp in self.outcomes)


@dataclass(frozen=True, eq=False)
class InterventionSchedule:
    """Instruments at strictly increasing times with optional feedback.

    ``feedback`` maps a step index to {outcome-record prefix -> Instrument};
    the prefix refers to the record gathered so far, and the deepest
    declared prefix wins.  All overrides of one step must share the base
    instrument's outcome alphabet.  The attached protocol drives the
    system Hamiltonian between interventions.
    """

    registry: FactorRegistry
    times: tuple[float, ...]
    instruments: tuple[Instrument, ...]
    protocol: Protocol
    feedback: Mapping[int, Mapping[tuple[str, ...], Instrument]]
    h_bath: np.ndarray | None = None
    v_coupling: np.ndarray | None = None

    def __init__(self, registry, times, instruments, protocol,
                 feedback=None, h_bath=None, v_coupling=None):
        times = tuple(float(t) for t in times)
        instruments = tuple(instruments)
        if len(times) != len(instruments):
            raise ValueError("one instrument per intervention time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"intervention times must strictly increase: {times}")
        fb: dict[int, dict[tuple[str, ...], Instrument]] = {}
        for k, table in (feedback or {}).items():
            k = int(k)
            if not 0 <= k < len(times):
                raise ValueError(f"feedback references unknown step {k}")
            for prefix, inst in table.items():
                prefix = tuple(prefix)
                if len(prefix) > k:
                    raise ValueError(
                        f"feedback for step {k} may only read {k} earlier outcomes, "
                        f"got prefix {prefix}")
                if inst.labels != instruments[k].labels:
                    raise ValueError(
                        f"feedback override at step {k} changes the outcome "
                        f"alphabet {instruments[k].labels} -> {inst.labels}")
                fb.setdefault(k, {})[prefix] = inst
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "instruments", instruments)
        object.__setattr__(self, "protocol", protocol)
        object.__setattr__(self, "feedback", fb)
        object.__setattr__(self, "h_bath", None if h_bath is None else np.asarray(h_bath, dtype=complex))
        object.__setattr__(self, "v_coupling", None if v_coupling is None else np.asarray(v_coupling, dtype=complex))

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def alphabet(self, k: int) -> tuple[str, ...]:
        return self.instruments[k].labels

    def instrument_at(self, k: int, prefix: Sequence[str]) -> Instrument:
        prefix = tuple(prefix)
        table = self.feedback.get(k, {})
        for cut in range(len(prefix), -1, -1):
            inst = table.get(prefix[:cut])
            if inst is not None:
                return inst
        return self.instruments[k]

    def all_variants(self, k: int) -> list[Instrument]:
        return [self.instruments[k]] + list(self.feedback.get(k, {}).values())

    def h_sb(self, h_system: np.ndarray) -> np.ndarray:
        """Full system-bath Hamiltonian for a given system term."""
        dims = self.registry.dims(("S", "B"))
        h = embed_factors(h_system, [0], dims)
        if self.h_bath is not None:
            h = h + embed_factors(self.h_bath, [1], dims)
        if self.v_coupling is not None:
            h = h + self.v_coupling
        return h

    def records(self, n_resolved: int):
        """All outcome records of the first ``n_resolved`` steps."""
        import itertools

        alphabets = [self.alphabet(k) for k in range(n_resolved)]
        return itertools.product(*alphabets) if alphabets else iter([()])


def _evolve_sb(schedule: InterventionSchedule, mat: np.ndarray,
               t_from: float, t_to: float, prefix: Sequence[str]) -> np.ndarray:
    for seg, a, b in schedule.protocol.iter_segments(t_from, t_to, prefix):
        u = expm_herm(schedule.h_sb(seg.h_system), -1j * (b - a))
        mat = u @ mat @ dagger(u)
    return mat


def _apply_sequence(schedule: InterventionSchedule, ops: Sequence[CPMap],
                    record: Sequence[str], sb_init: DensityOperator,
                    t: float) -> np.ndarray:
    reg = schedule.registry
    dims = reg.dims(("S", "B"))
    if sb_init.support != reg.canonical(("S", "B")):
        raise ValueError("initial state must live on the system-bath factors")
    applied = sum(1 for tk in schedule.times if tk <= t + 1e-12)
    if len(ops) != applied:
        raise ValueError(
            f"record covers {len(ops)} interventions but {applied} are scheduled "
            f"up to t={t}")
    mat = sb_init.mat
    t_cur = schedule.protocol.t_start
    for k, cp in enumerate(ops):
        mat = _evolve_sb(schedule, mat, t_cur, schedule.times[k], record[:k])
        positions = [("S", "B").index(l) for l in cp.support]
        mat = cp.apply_mat(mat, dims, positions)
        t_cur = schedule.times[k]
    return _evolve_sb(schedule, mat, t_cur, t, record)


def evaluate_process_tensor(schedule: InterventionSchedule,
                            record: Sequence[str],
                            sb_init: DensityOperator,
                            t: float) -> DensityOperator:
    """Unnormalized conditional system state after the recorded outcomes.

    Applies the outcome's CP map at each scheduled time (with feedback
    resolved from the record prefix) interleaved with the driven
    system-bath unitary, then traces out the bath.  The trace of the result
    is the record probability; summing over all records at fixed t gives a
    normalized state.
    """
    record = tuple(str(r) for r in record)
    ops = []
    for k, r in enumerate(record):
        inst = schedule.instrument_at(k, record[:k])
        if r not in inst.labels:
            raise KeyError(f"unknown outcome {r!r} at step {k}; "
                           f"alphabet {inst.labels}")
        ops.append(inst.cp_map(r))
    mat = _apply_sequence(schedule, ops, record, sb_init, t)
    reg = schedule.registry
    from .algebra import ptrace_factors

    sys_mat = ptrace_factors(mat, reg.dims(("S", "B")), [0])
    return DensityOperator(OperatorMatrix(reg, ("S",), sys_mat))


def multilinearity_check(schedule: InterventionSchedule,
                         ops_a: Sequence[CPMap], ops_b: Sequence[CPMap],
                         alpha: float, sb_init: DensityOperator,
                         t: float) -> tuple[bool, float]:
    """Check per-slot linearity of the multi-time map.

    For each slot k the sequence with the mixed map alpha*a_k + (1-alpha)*b_k
    must equal the convex combination of the two pure sequences entrywise.
    Returns (ok, max deviation); never raises on failure.
    """
    if len(ops_a) != len(ops_b):
        raise ValueError("operation lists must have equal length")
    n = len(ops_a)
    worst = 0.0
    for k in range(n):
        mixed = list(ops_a)
        mixed[k] = mix_cp(ops_a[k], ops_b[k], alpha)
        swapped = list(ops_a)
        swapped[k] = ops_b[k]
        lhs = _apply_sequence(schedule, mixed, ("",) * n, sb_init, t)
        rhs = (alpha * _apply_sequence(schedule, list(ops_a), ("",) * n, sb_init, t)
               + (1 - alpha) * _apply_sequence(schedule, swapped, ("",) * n, sb_init, t))
        worst = max(worst, max_norm(lhs - rhs))
    return worst <= 1e-10, worst
