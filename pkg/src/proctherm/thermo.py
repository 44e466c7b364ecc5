"""Trajectory-resolved thermodynamics of the autonomous model.

The supersystem is the system plus every ancilla plus the outcome
registers; it couples to the bath and, instantaneously, to the dephasing
registers.  Strong coupling is handled through the Hamiltonian of mean
force H*, defined by tr_B exp(-beta H_XB) = exp(-beta H*) Z_B, so that the
reduced equilibrium state is the Gibbs state of H* with partition function
Z* = Z_XB / Z_B.  With that normalization H* reduces to the bare system
Hamiltonian when the coupling vanishes.

Per branch (record r, probability p, conditional system+ancilla state rho):

    u = tr{(H* + beta dH*/dbeta) rho} + sum_k <H_A(k)>
    s = -ln p + S_vN(rho) + beta^2 tr{(dH*/dbeta) rho}
    f = tr{H* rho} + sum_k <H_A(k)> + T ln p - T S_vN(rho)
    q = du - w                       (first law, per branch)

Work has three channels: driving switch-sums on the system term, the
control-interaction term (window switches, or the energy kick of an
instantaneous control), and the measurement term.  The measurement term
comes in two conventions that agree on average but not per branch: the
canonical one books only the ancilla's energy change; the alternative one
books the system+ancilla energy change caused by the knowledge update and
is the one that reproduces two-point projective energy statistics on
isolated systems.

Entropy production is computed in two independently evaluated forms, the
first-law form Sigma = dS - beta Q and a relative-entropy form against the
instantaneous reference Gibbs states; for a thermal initial system-bath
state they agree identically and are non-negative.

Ancillas are accounted from the initial time in their declared preparation
states: before entering the dynamics each contributes constant energy and
entropy offsets, so nothing jumps when it starts interacting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .algebra import (
    DensityOperator,
    OperatorMatrix,
    embed_factors,
    log_partition,
    logsumexp,
    max_norm,
    ptrace_factors,
    vn_entropy_mat,
)
from .simulate import (
    AutonomousModel,
    Branch,
    RunResult,
    Snapshot,
    StepTrace,
    ancilla_label,
)

__all__ = [
    "MeanForceData",
    "mean_force_hamiltonian",
    "BranchThermo",
    "EnsembleThermo",
    "ThermoLedger",
    "ThermoEvaluator",
    "evaluate_run",
    "internal_energy",
    "entropy_and_free_energy",
    "work_driving",
    "heat",
    "entropy_production",
    "work_measurement_canonical",
    "work_measurement_alternative",
    "tpm_work",
    "singular_control_work",
    "ConventionError",
]


class ConventionError(ValueError):
    """A quantity was requested under assumptions the scenario violates."""


# ---------------------------------------------------------------------------
# Hamiltonian of mean force
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeanForceData:
    """Mean-force Hamiltonian with its inverse-temperature derivative."""

    h_star: OperatorMatrix
    z_star: float
    beta: float
    dbeta_h_star: OperatorMatrix

    @property
    def log_z_star(self) -> float:
        return math.log(self.z_star)


def _mean_force_core(h_xb: np.ndarray, dims: Sequence[int], x_pos: Sequence[int],
                     ln_z_bath: float, beta: float) -> tuple[np.ndarray, float]:
    """H* and ln Z* for one inverse temperature."""
    w, v = np.linalg.eigh(h_xb)
    w0 = float(w[0])
    m0 = ptrace_factors((v * np.exp(-beta * (w - w0))) @ v.conj().T, dims, x_pos)
    m0 = 0.5 * (m0 + m0.conj().T)
    wm, vm = np.linalg.eigh(m0)
    wm = np.clip(wm, 1e-300, None)
    ln_m = (vm * np.log(wm)) @ vm.conj().T
    eye = np.eye(ln_m.shape[0])
    h_star = -(ln_m) / beta + (w0 + ln_z_bath / beta) * eye
    h_star = 0.5 * (h_star + h_star.conj().T)
    ln_z_star = logsumexp(-beta * w) - ln_z_bath
    return h_star, ln_z_star


def mean_force_hamiltonian(h_xb: OperatorMatrix, x_labels: Sequence[str],
                           beta: float, dbeta: float | None = None,
                           h_bath: np.ndarray | None = None) -> MeanForceData:
    """Mean-force Hamiltonian of the ``x_labels`` part of a coupled pair.

    ``h_bath`` is the bare Hamiltonian of the traced-out factors (zero if
    omitted); it fixes the normalization Z* = Z_XB / Z_B.  The
    inverse-temperature derivative is a central difference with one
    Richardson refinement, step ``dbeta`` (default 1e-4 * beta).
    """
    if beta <= 0:
        raise ValueError(f"inverse temperature must be positive, got {beta}")
    if not h_xb.is_hermitian():
        raise ValueError("mean force requires a Hermitian joint Hamiltonian")
    reg = h_xb.registry
    x_labels = reg.canonical(x_labels)
    if not set(x_labels) < set(h_xb.support):
        raise ValueError(f"{x_labels} must be a proper subset of {h_xb.support}")
    dims = reg.dims(h_xb.support)
    x_pos = [h_xb.support.index(l) for l in x_labels]
    bath_dim = int(np.prod([d for i, d in enumerate(dims) if i not in x_pos]))
    if h_bath is None:
        h_bath = np.zeros((bath_dim, bath_dim))
    dbeta = 1e-4 * beta if dbeta is None else float(dbeta)
    if dbeta <= 0 or dbeta >= beta:
        raise ValueError(f"derivative step {dbeta} must lie in (0, beta)")

    def at(b):
        return _mean_force_core(h_xb.mat, dims, x_pos, log_partition(h_bath, b), b)

    h_star, ln_z_star = at(beta)

    def central(h):
        hp, _ = at(beta + h)
        hm, _ = at(beta - h)
        return (hp - hm) / (2 * h)

    d1, d2 = central(dbeta), central(dbeta / 2)
    dbeta_h = (4.0 * d2 - d1) / 3.0
    dbeta_h = 0.5 * (dbeta_h + dbeta_h.conj().T)
    return MeanForceData(
        OperatorMatrix(reg, x_labels, h_star, hermitian=True),
        math.exp(ln_z_star), beta,
        OperatorMatrix(reg, x_labels, dbeta_h, hermitian=True))


def internal_energy(rho: DensityOperator, mfd: MeanForceData) -> float:
    """tr{(H* + beta dH*/dbeta) rho}, marginalized onto the H* factors."""
    op = mfd.h_star.mat + mfd.beta * mfd.dbeta_h_star.mat
    marginal = _marginal_onto(rho, mfd.h_star.support)
    return float(np.real(np.trace(op @ marginal)))


def entropy_and_free_energy(p: float, rho_sa: DensityOperator,
                            mfd: MeanForceData,
                            extra_energy: float = 0.0) -> tuple[float, float]:
    """Per-branch entropy and free energy from the record probability and
    the conditional supersystem state.

    ``extra_energy`` carries bare ancilla terms outside the mean-force
    factors.  Identity f = u - T s holds by construction up to the -ln p
    bookkeeping shared between them.
    """
    if p <= 0:
        raise ValueError("zero-probability branch has no trajectory entropy")
    beta = mfd.beta
    s_vn = vn_entropy_mat(rho_sa.mat)
    marginal = _marginal_onto(rho_sa, mfd.h_star.support)
    corr = float(np.real(np.trace(mfd.dbeta_h_star.mat @ marginal)))
    s = -math.log(p) + s_vn + beta ** 2 * corr
    f = float(np.real(np.trace(mfd.h_star.mat @ marginal))) + extra_energy \
        + (math.log(p) - s_vn) / beta
    return s, f


def _marginal_onto(rho: DensityOperator, support: tuple[str, ...]) -> np.ndarray:
    if rho.support == support:
        return rho.mat
    reg = rho.op.registry
    keep = [rho.support.index(l) for l in support]
    return ptrace_factors(rho.mat, reg.dims(rho.support), keep)


# ---------------------------------------------------------------------------
# per-run evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BranchThermo:
    """One branch row of the thermodynamic ledger (all values cumulative)."""

    labels: tuple[str, ...]
    p: float
    u: float
    du: float
    w_sys: float
    w_ctrl: float
    w_meas: float
    w_meas_alt: float
    q: float
    q_alt: float
    s: float
    f: float

    @property
    def w(self) -> float:
        return self.w_sys + self.w_ctrl + self.w_meas

    @property
    def w_alt(self) -> float:
        return self.w_sys + self.w_ctrl + self.w_meas_alt


@dataclass(frozen=True, eq=False)
class EnsembleThermo:
    """Ensemble aggregates at one report time."""

    time: float
    total_weight: float
    u: float
    du: float
    w: float
    w_alt: float
    w_budget: float
    q: float
    s: float
    ds: float
    f: float
    sigma_first_law: float
    sigma_rel_ent: float | None
    pruned_mass: float


@dataclass(frozen=True, eq=False)
class ThermoLedger:
    """Branch rows and ensemble aggregates for every report time."""

    times: tuple[float, ...]
    branch_rows: dict[float, tuple[BranchThermo, ...]]
    ensemble_rows: tuple[EnsembleThermo, ...]
    control_caveat: bool = False


class ThermoEvaluator:
    """Evaluates the thermodynamic functionals over a finished run."""

    def __init__(self, result: RunResult, dbeta: float | None = None):
        self.result = result
        self.model = result.model
        self.beta = self.model.beta
        self.bare = self.model.mean_force_bare
        self.dbeta = 1e-4 * self.beta if dbeta is None else float(dbeta)
        self._mf_cache: dict[bytes, tuple[np.ndarray, np.ndarray, float]] = {}
        # constants of the unentered ancillas, counted from the initial time
        self._e_anc0, self._s_anc0, self._lnz_anc = [], [], []
        for spec in self.model.steps:
            self._e_anc0.append(float(np.real(np.trace(spec.h_ancilla @ spec.ancilla_state))))
            self._s_anc0.append(vn_entropy_mat(spec.ancilla_state))
            self._lnz_anc.append(log_partition(spec.h_ancilla, self.beta))
        self._ref: tuple[float, float, float] | None = None

    # -- mean force ----------------------------------------------------------

    def _mean_force(self, h_sys: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """(H*, dH*/dbeta, ln Z*) on the system factor for one drive value."""
        key = h_sys.tobytes()
        out = self._mf_cache.get(key)
        if out is not None:
            return out
        model, beta = self.model, self.beta
        if self.bare or not model.has_sb_coupling():
            # decoupled (or declared weak-coupling): H* is the bare term
            lnz = log_partition(h_sys, beta)
            out = (np.asarray(h_sys, dtype=complex), np.zeros_like(h_sys, dtype=complex), lnz)
        else:
            dims = model.registry.dims(("S", "B"))
            h_b = model.h_bath if model.h_bath is not None else np.zeros((dims[1], dims[1]))
            h_xb = embed_factors(h_sys, [0], dims) + embed_factors(h_b, [1], dims) \
                + model.v_coupling
            ln_z_b = log_partition(h_b, beta)

            def at(b):
                return _mean_force_core(h_xb, dims, [0], log_partition(h_b, b), b)

            h_star, ln_z_star = at(beta)
            d1 = (at(beta + self.dbeta)[0] - at(beta - self.dbeta)[0]) / (2 * self.dbeta)
            d2 = (at(beta + self.dbeta / 2)[0] - at(beta - self.dbeta / 2)[0]) / self.dbeta
            dh = (4.0 * d2 - d1) / 3.0
            out = (h_star, 0.5 * (dh + dh.conj().T), ln_z_star)
        self._mf_cache[key] = out
        return out

    # -- branch rows ---------------------------------------------------------

    def _branch_pieces(self, snap: Snapshot, br: Branch):
        """(p, u, s_vn_plus_pending, corr, e_bare_anc, h_star_tr) for one branch."""
        model = self.model
        if br.window_applied is not None:
            raise ConventionError("thermodynamic report times must lie outside "
                                  "control windows")
        space = model.space(br.support)
        p = br.weight
        entered = [i for i in range(model.n_steps) if ancilla_label(i) in br.support]
        pending = [i for i in range(model.n_steps) if i not in entered]
        rho_s = space.ptrace(br.state, ["S"]) / p
        sa_labels = tuple(l for l in br.support if l != "B")
        rho_sa = space.ptrace(br.state, sa_labels) / p
        h_star, dh, _ = self._mean_force(br.h_sys_applied)
        e_anc = 0.0
        for i in entered:
            spec = model.steps[i]
            if max_norm(spec.h_ancilla) > 0:
                rho_a = space.ptrace(br.state, [ancilla_label(i)]) / p
                e_anc += float(np.real(np.trace(spec.h_ancilla @ rho_a)))
        e_anc += sum(self._e_anc0[i] for i in pending)
        corr = float(np.real(np.trace(dh @ rho_s)))
        h_star_tr = float(np.real(np.trace(h_star @ rho_s)))
        u = h_star_tr + self.beta * corr + e_anc
        s_vn = vn_entropy_mat(rho_sa) + sum(self._s_anc0[i] for i in pending)
        return p, u, s_vn, corr, e_anc, h_star_tr

    def _reference(self) -> tuple[float, float, float]:
        """(u0, s0, E_bare0) at the initial time."""
        if self._ref is None:
            snap = self.result.initial
            br = next(iter(snap.ledger.branches.values()))
            p, u, s_vn, corr, _, _ = self._branch_pieces(snap, br)
            s0 = s_vn + self.beta ** 2 * corr  # single branch: -ln p = 0
            self._ref = (u, s0, self._bare_energy(snap))
        return self._ref

    def _bare_energy(self, snap: Snapshot) -> float:
        """tr{H rho} of the inclusive state (system, bath, ancillas)."""
        model = self.model
        total = 0.0
        tw = 0.0
        for br in snap.ledger.branches.values():
            space = model.space(br.support)
            h = space.full_hamiltonian(br.h_sys_applied, br.window_applied)
            total += float(np.real(np.trace(h @ br.state)))
            tw += br.weight
        pending = [i for i in range(model.n_steps)
                   if ancilla_label(i) not in model.support_after(snap.ledger.steps_done)]
        total += tw * sum(self._e_anc0[i] for i in pending)
        return total

    def branch_rows(self, snap: Snapshot) -> tuple[BranchThermo, ...]:
        u0, _, _ = self._reference()
        rows = []
        for br in snap.ledger.branches.values():
            p, u, s_vn, corr, e_anc, h_star_tr = self._branch_pieces(snap, br)
            if p <= 0:
                continue
            s = -math.log(p) + s_vn + self.beta ** 2 * corr
            f = h_star_tr + e_anc + (math.log(p) - s_vn) / self.beta
            du = u - u0
            rows.append(BranchThermo(
                labels=br.labels, p=p, u=u, du=du,
                w_sys=br.w_sys, w_ctrl=br.w_ctrl,
                w_meas=br.w_meas, w_meas_alt=br.w_meas_alt,
                q=du - br.w_total, q_alt=du - br.w_total_alt,
                s=s, f=f))
        return tuple(rows)

    # -- ensemble ------------------------------------------------------------

    def ensemble(self, snap: Snapshot) -> EnsembleThermo:
        u0, s0, e0 = self._reference()
        rows = self.branch_rows(snap)
        tw = sum(r.p for r in rows)
        u = sum(r.p * r.u for r in rows)
        s = sum(r.p * r.s for r in rows)
        f = sum(r.p * r.f for r in rows)
        w = sum(r.p * r.w for r in rows)
        w_alt = sum(r.p * r.w_alt for r in rows)
        du = u - tw * u0
        ds = s - tw * s0
        q = du - w
        sigma_fl = ds - self.beta * q
        sigma_re = None
        if self.model.gibbs_initial and not self.bare:
            sigma_re = self._sigma_relent(snap)
        w_budget = self._bare_energy(snap) - tw * e0
        return EnsembleThermo(
            time=snap.time, total_weight=tw, u=u, du=du, w=w, w_alt=w_alt,
            w_budget=w_budget, q=q, s=s, ds=ds, f=f,
            sigma_first_law=sigma_fl, sigma_rel_ent=sigma_re,
            pruned_mass=snap.ledger.pruned_mass)

    def _sigma_relent(self, snap: Snapshot) -> float:
        """Entropy production as a difference of relative entropies.

        Uses unitary invariance of the total entropy, the degeneracy of the
        memory registers, and the block structure of the conditioned
        Hamiltonian; every term reduces to branch-level data.
        """
        model, beta = self.model, self.beta
        m = snap.ledger.steps_done
        support = model.support_after(m)
        space = model.space(support)
        pending = [i for i in range(model.n_steps) if i >= m]
        # ln Z of the conditioned supersystem+bath Hamiltonian: one block per
        # resolved record, including pruned ones
        spectra = []
        for labels in self.model.schedule.records(m):
            try:
                br = snap.ledger.get(labels)
                h_sys = br.h_sys_applied
            except KeyError:
                h_sys = model.protocol.segment_at(snap.time, labels).h_system
            h_r = space.full_hamiltonian(h_sys, None)
            spectra.append(np.linalg.eigvalsh(h_r))
        ln_z_sba = logsumexp(-beta * np.concatenate(spectra))
        ln_z_xb = ln_z_sba + sum(self._lnz_anc[i] for i in pending)
        dims = model.registry.dims(("S", "B"))
        h_b = model.h_bath if model.h_bath is not None else np.zeros((dims[1], dims[1]))
        ln_z_b = log_partition(h_b, beta)
        # total-state relative entropy to the reference product state
        e_xb = self._bare_energy(snap)
        s_tot0 = vn_entropy_mat(self.model.sb_init.mat) + sum(self._s_anc0)
        d_tot = beta * e_xb + ln_z_xb - s_tot0
        # supersystem relative entropy to its mean-force Gibbs state
        s_x = 0.0
        e_star = 0.0
        for br in snap.ledger.branches.values():
            p, u, s_vn, corr, e_anc, h_star_tr = self._branch_pieces(snap, br)
            if p <= 0:
                continue
            s_x += -p * math.log(p) + p * s_vn
            e_star += p * (h_star_tr + e_anc)
        d_x = -s_x + beta * e_star + (ln_z_xb - ln_z_b)
        return d_tot - d_x


def evaluate_run(result: RunResult, dbeta: float | None = None) -> ThermoLedger:
    """Thermodynamic ledger for every report time of a finished run."""
    ev = ThermoEvaluator(result, dbeta=dbeta)
    times = []
    branch_rows = {}
    ensemble_rows = []
    for snap in result.snapshots:
        times.append(snap.time)
        branch_rows[snap.time] = ev.branch_rows(snap)
        ensemble_rows.append(ev.ensemble(snap))
    return ThermoLedger(tuple(times), branch_rows, tuple(ensemble_rows),
                        control_caveat=result.control_caveat)


# ---------------------------------------------------------------------------
# measurement work and special setups
# ---------------------------------------------------------------------------

def _prefix_trace(trace: StepTrace, labels: Sequence[str]):
    labels = tuple(str(l) for l in labels)
    for tr in trace.per_prefix.values():
        if tr.labels == labels:
            return tr
    raise KeyError(f"no branch with prefix {labels} in the step trace")


def work_measurement_canonical(trace: StepTrace, record: Sequence[str]) -> float:
    """Ancilla-energy measurement work of one step for one outcome record.

    The record is the full outcome tuple through this step; its last entry
    selects the outcome, the rest the parent branch.
    """
    record = tuple(str(l) for l in record)
    tr = _prefix_trace(trace, record[:-1])
    return tr.w_meas[record[-1]]


def work_measurement_alternative(trace: StepTrace, record: Sequence[str]) -> float:
    """Knowledge-update (system+ancillas) measurement work of one step."""
    record = tuple(str(l) for l in record)
    tr = _prefix_trace(trace, record[:-1])
    return tr.w_meas_alt[record[-1]]


def work_driving(branch: Branch) -> tuple[float, float]:
    """Cumulative driving work of one branch: (system term, control term).

    Both are exact switch-sums accrued by the simulator; with a
    piecewise-constant protocol there is no quadrature error to speak of.
    """
    return branch.w_sys, branch.w_ctrl


def heat(row: BranchThermo, alternative: bool = False) -> float:
    """Heat of one branch row via the first law."""
    return row.q_alt if alternative else row.q


def entropy_production(row: EnsembleThermo) -> tuple[float, float | None]:
    """(first-law form, relative-entropy form) of one ensemble row.

    The second entry is None when no exact reference exists (bare
    mean-force mode or a non-thermal initial system-bath state).
    """
    return row.sigma_first_law, row.sigma_rel_ent


@dataclass(frozen=True, eq=False)
class TPMRow:
    labels: tuple[str, ...]
    prob: float
    work: float


def tpm_work(result: RunResult) -> tuple[TPMRow, ...]:
    """Driving work plus final knowledge-update work, per outcome record.

    On an isolated system whose first and last interventions are projective
    energy measurements, this reproduces the difference of the two energy
    readings exactly, which is the two-point-measurement work statistic.
    Raises :class:`ConventionError` when a bath coupling is present: the
    identification is only valid for isolated systems.
    """
    model = result.model
    if model.has_sb_coupling():
        raise ConventionError(
            "two-point work statistics assume an isolated system; this model "
            "couples the system to the bath")
    if model.n_steps < 2:
        raise ConventionError("two-point statistics need at least two "
                              "interventions (initial and final readout)")
    last = result.traces[-1]
    rows = []
    for br in result.final.branches.values():
        w = br.w_sys + work_measurement_alternative(last, br.labels)
        rows.append(TPMRow(br.labels, br.weight, w))
    return tuple(rows)


def singular_control_work(state: DensityOperator, u_ctrl: OperatorMatrix,
                          h_system: OperatorMatrix,
                          v_coupling: OperatorMatrix | None,
                          h_ancilla: OperatorMatrix | None,
                          window_width: float | None = None) -> float:
    """Energy change booked by an instantaneous control unitary.

    tr{(H_S + V_SB + H_A)(U rho U' - rho)}: the coupling term matters
    whenever the system-bath coupling is nonzero, so this work needs bath
    access.  Raises :class:`ConventionError` when called for a finite-width
    control, whose work is the coupling switch-sum instead.
    """
    if window_width is not None:
        raise ConventionError(
            "finite-width controls book their work through coupling switches; "
            "the instantaneous form does not apply")
    u = u_ctrl.embed(state.support)
    after = u.mat @ state.mat @ u.mat.conj().T
    total = 0.0
    for op in (h_system, v_coupling, h_ancilla):
        if op is None:
            continue
        big = op.embed(state.support)
        total += float(np.real(np.trace(big.mat @ (after - state.mat))))
    weight = state.weight if state.weight > 0 else 1.0
    return total / weight
