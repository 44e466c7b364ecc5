"""Autonomous branch-resolved simulation of an intervention schedule.

The inclusive model evolves system, bath and one fresh ancilla per step
through the fixed per-step order: ancilla preparation, control interaction,
ancilla readout into the memory register, memory dephasing, then driven
system-bath evolution until the next step.  Because the dephased memory is
only classically correlated with everything else, the simulator stores the
total state as a ledger of unnormalized conditional branches keyed by the
outcome record; that representation is exact, and the pre-dephasing
coherent register state is materialized only transiently when validation
is switched on.

Ancillas stay in the branch state after their step: later conditioning
can still update them, and the joint system-ancilla state enters the
thermodynamic bookkeeping.  Work from the driving accrues as exact
switch-sums; the instantaneous control kick is booked from the energy
change it causes, which requires the system-bath coupling term (flagged,
since that is not operationally accessible).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .algebra import (
    DensityOperator,
    FactorRegistry,
    OperatorMatrix,
    dagger,
    embed_factors,
    expm_herm,
    max_norm,
    ptrace_factors,
    unitary_log_generator,
)
from .channels import Instrument, InterventionSchedule
from .dilation import (
    DilationResult,
    dephasing_unitary,
    dilate_instrument,
    measurement_unitary,
)
from .tolerances import DEFAULT

__all__ = [
    "AutonomousModel",
    "Branch",
    "BranchLedger",
    "StepTrace",
    "PrefixTrace",
    "Simulator",
    "RunResult",
    "Snapshot",
    "UnknownRecordError",
    "evolve_sb",
    "apply_instantaneous_control",
    "ancilla_label",
]


class UnknownRecordError(KeyError):
    """Raised when a record is absent from the ledger (pruned or invalid)."""


def ancilla_label(k: int) -> str:
    return f"A{k}"


def _iter_static(segments, t_from: float, t_to: float):
    for seg in segments:
        a, b = max(seg.t0, t_from), min(seg.t1, t_to)
        if b - a > 1e-13:
            yield seg, a, b


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepSpec:
    """Resolved per-step hardware shared by all feedback variants."""

    index: int
    time: float
    ancilla_dim: int
    ancilla_state: np.ndarray
    h_ancilla: np.ndarray
    window_width: float | None
    # for collision steps the hardware is declared once:
    fixed: DilationResult | None = None


class _Space:
    """Embedding helpers for one branch support, with Hamiltonian caches."""

    def __init__(self, model: "AutonomousModel", support: tuple[str, ...]):
        self.support = support
        reg = model.registry
        self.dims = reg.dims(support)
        self.pos = {l: i for i, l in enumerate(support)}
        h = np.zeros((int(np.prod(self.dims)), int(np.prod(self.dims))), dtype=complex)
        if model.h_bath is not None:
            h = h + embed_factors(model.h_bath, [self.pos["B"]], self.dims)
        if model.v_coupling is not None:
            h = h + embed_factors(model.v_coupling, [self.pos["S"], self.pos["B"]], self.dims)
        for k, spec in enumerate(model.steps):
            label = ancilla_label(k)
            if label in self.pos and max_norm(spec.h_ancilla) > 0:
                h = h + embed_factors(spec.h_ancilla, [self.pos[label]], self.dims)
        self.h_static = h
        self._cache: dict[tuple, np.ndarray] = {}

    def embed(self, mat: np.ndarray, labels: Sequence[str]) -> np.ndarray:
        key = ("e", id(mat)) + tuple(labels)
        out = self._cache.get(key)
        if out is None:
            out = embed_factors(mat, [self.pos[l] for l in labels], self.dims)
            self._cache[key] = out
        return out

    def full_hamiltonian(self, h_system: np.ndarray,
                         window: tuple[int, np.ndarray] | None) -> np.ndarray:
        h = self.h_static + self.embed(h_system, ["S"])
        if window is not None:
            k, v = window
            h = h + self.embed(v, ["S", ancilla_label(k)])
        return h

    def ptrace(self, mat: np.ndarray, keep: Sequence[str]) -> np.ndarray:
        return ptrace_factors(mat, self.dims, [self.pos[l] for l in keep])


@dataclass(frozen=True, eq=False)
class AutonomousModel:
    """Inclusive model: registry, Hamiltonian terms, schedule, hardware."""

    registry: FactorRegistry
    schedule: InterventionSchedule
    steps: tuple[StepSpec, ...]
    beta: float
    sb_init: DensityOperator
    gibbs_initial: bool = True
    mean_force_bare: bool = False
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "_spaces", {})
        object.__setattr__(self, "_dilations", {})

    # -- assembly -----------------------------------------------------------

    @classmethod
    def assemble(cls, *, s_dim: int, b_dim: int = 1, beta: float,
                 protocol, h_bath=None, v_coupling=None,
                 steps: Sequence[Mapping] = (), feedback=None,
                 sb_init: np.ndarray | None = None,
                 mean_force_bare: bool = False, name: str = "model"):
        """Build a model from declarative step descriptions.

        Each step mapping holds ``time`` plus either ``instrument`` (an
        :class:`Instrument`; control hardware is synthesized by dilation)
        or ``collision`` (declared hardware: ``ancilla_state``, ``unitary``,
        ``projectors``, optional ``labels``).  Optional per-step keys:
        ``h_ancilla`` and ``window`` (a positive width; default is an
        instantaneous control).
        """
        from .dilation import instrument_from_dilation

        factors = [("S", int(s_dim)), ("B", int(b_dim)), ("P", 1)]
        specs: list[StepSpec] = []
        instruments: list[Instrument] = []
        times: list[float] = []
        feedback = dict(feedback or {})
        for k, st in enumerate(steps):
            t_k = float(st["time"])
            times.append(t_k)
            window = st.get("window")
            if "instrument" in st:
                inst: Instrument = st["instrument"]
                variants = [inst] + list(feedback.get(k, {}).values())
                d_anc = max(v.kraus_count() for v in variants)
                ref = np.zeros((d_anc, d_anc), dtype=complex)
                ref[0, 0] = 1.0
                h_anc = st.get("h_ancilla")
                h_anc = np.zeros((d_anc, d_anc), dtype=complex) if h_anc is None \
                    else np.asarray(h_anc, dtype=complex)
                if h_anc.shape != (d_anc, d_anc):
                    raise ValueError(
                        f"step {k}: ancilla Hamiltonian must be {d_anc}x{d_anc} "
                        f"(Kraus count incl. feedback variants), got {h_anc.shape}")
                if window is not None and k in feedback:
                    raise ValueError(f"step {k}: finite-width control cannot be "
                                     "combined with instrument feedback")
                specs.append(StepSpec(k, t_k, d_anc, ref, h_anc,
                                      None if window is None else float(window)))
                instruments.append(inst)
            elif "collision" in st:
                col = dict(st["collision"])
                anc = np.asarray(col["ancilla_state"], dtype=complex)
                d_anc = anc.shape[0]
                u = np.asarray(col["unitary"], dtype=complex)
                if u.shape != (s_dim * d_anc, s_dim * d_anc):
                    raise ValueError(f"step {k}: control unitary must act on "
                                     f"system (x) ancilla")
                projs = col.get("projectors")
                projs = [np.eye(d_anc, dtype=complex)] if projs is None else \
                    [np.asarray(p, dtype=complex) for p in projs]
                labels = col.get("labels")
                labels = tuple(str(i + 1) for i in range(len(projs))) if labels is None \
                    else tuple(str(l) for l in labels)
                h_anc = st.get("h_ancilla")
                h_anc = np.zeros((d_anc, d_anc), dtype=complex) if h_anc is None \
                    else np.asarray(h_anc, dtype=complex)
                if k in feedback:
                    raise ValueError(f"step {k}: collision steps take no "
                                     "instrument feedback")
                fixed = DilationResult(s_dim, d_anc, anc, u, tuple(projs), labels)
                if fixed.unitarity_residual() > DEFAULT.dilation_unitary:
                    raise ValueError(f"step {k}: declared control is not unitary")
                specs.append(StepSpec(k, t_k, d_anc, anc, h_anc,
                                      None if window is None else float(window),
                                      fixed=fixed))
                instruments.append(instrument_from_dilation(
                    u, anc, projs, s_dim, labels=labels))
            else:
                raise ValueError(f"step {k}: needs 'instrument' or 'collision'")
            factors.append((ancilla_label(k), specs[-1].ancilla_dim))

        registry = FactorRegistry(factors)
        # overlay finite-width couplings on the protocol before freezing it
        for k, spec in enumerate(specs):
            if spec.window_width is None:
                continue
            hw = specs[k].fixed or dilate_instrument(instruments[k], spec.ancilla_dim)
            gen = unitary_log_generator(hw.unitary)
            t0, t1 = spec.time, spec.time + spec.window_width
            if t1 >= protocol.t_end - 1e-12:
                raise ValueError(f"step {k}: control window must end before the "
                                 "protocol does")
            if k + 1 < len(specs) and t1 > specs[k + 1].time + 1e-12:
                raise ValueError(f"step {k}: control window overlaps the next step")
            protocol = protocol.with_window(k, t0, t1, gen / spec.window_width)

        schedule = InterventionSchedule(registry, times, instruments, protocol,
                                        feedback=feedback, h_bath=h_bath,
                                        v_coupling=v_coupling)
        if schedule.times and schedule.times[0] < protocol.t_start - 1e-12:
            raise ValueError("first intervention happens before the protocol starts")
        if schedule.times and schedule.times[-1] > protocol.t_end + 1e-12:
            raise ValueError("an intervention is scheduled after the protocol ends")
        # a variant timeline may only deviate once its prefix is resolved
        for prefix, segs in protocol.variants.items():
            if len(prefix) > len(times):
                raise ValueError(f"protocol variant {prefix} is longer than the "
                                 "intervention schedule")
            resolved = times[len(prefix) - 1]
            base_segs = protocol.timeline(prefix[:-1])
            for seg, a, b in protocol.iter_segments(protocol.t_start, resolved, prefix):
                for bseg, ba, bb in _iter_static(base_segs, a, b):
                    if max_norm(seg.h_system - bseg.h_system) > 1e-12:
                        raise ValueError(
                            f"protocol variant {prefix} changes the drive at "
                            f"t={ba}, before its prefix is resolved at t={resolved}")

        gibbs_initial = sb_init is None
        if gibbs_initial:
            h0 = OperatorMatrix(registry, registry.canonical(("S", "B")),
                                schedule.h_sb(protocol.base[0].h_system),
                                hermitian=True)
            from .algebra import gibbs_state
            rho0, _ = gibbs_state(h0, beta)
        else:
            rho0 = DensityOperator.normalized(OperatorMatrix(
                registry, registry.canonical(("S", "B")),
                np.asarray(sb_init, dtype=complex)))
        return cls(registry, schedule, tuple(specs), float(beta), rho0,
                   gibbs_initial=gibbs_initial, mean_force_bare=mean_force_bare,
                   name=name)

    # -- geometry -----------------------------------------------------------

    @property
    def protocol(self):
        return self.schedule.protocol

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def space(self, support: tuple[str, ...]) -> _Space:
        sp = self._spaces.get(support)
        if sp is None:
            sp = _Space(self, support)
            self._spaces[support] = sp
        return sp

    @property
    def h_bath(self):
        return self.schedule.h_bath

    @property
    def v_coupling(self):
        return self.schedule.v_coupling

    def has_sb_coupling(self) -> bool:
        return self.v_coupling is not None and max_norm(self.v_coupling) > 0

    def hardware(self, k: int, prefix: Sequence[str]) -> DilationResult:
        """Control hardware for step k given the outcome prefix."""
        spec = self.steps[k]
        if spec.fixed is not None:
            return spec.fixed
        inst = self.schedule.instrument_at(k, prefix)
        key = (k, id(inst))
        hw = self._dilations.get(key)
        if hw is None:
            hw = dilate_instrument(inst, spec.ancilla_dim)
            self._dilations[key] = hw
        return hw

    def support_after(self, n_entered: int) -> tuple[str, ...]:
        return ("S", "B") + tuple(ancilla_label(i) for i in range(n_entered))


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Branch:
    """Unnormalized conditional state plus per-trajectory work tallies."""

    record: tuple[int, ...]
    labels: tuple[str, ...]
    state: np.ndarray
    support: tuple[str, ...]
    w_sys: float = 0.0       # driving work on the system term
    w_ctrl: float = 0.0      # control-interaction work (window switches or kick)
    w_meas: float = 0.0      # measurement work, ancilla-energy convention
    w_meas_alt: float = 0.0  # measurement work, knowledge-update convention
    h_sys_applied: np.ndarray | None = None
    window_applied: tuple[int, np.ndarray] | None = None

    @property
    def weight(self) -> float:
        return float(np.real(np.trace(self.state)))

    @property
    def w_total(self) -> float:
        return self.w_sys + self.w_ctrl + self.w_meas

    @property
    def w_total_alt(self) -> float:
        return self.w_sys + self.w_ctrl + self.w_meas_alt

    def replace(self, **kw) -> "Branch":
        return dataclasses.replace(self, **kw)


@dataclass(eq=False)
class BranchLedger:
    """Outcome-keyed map of branches at one instant."""

    time: float
    branches: dict[tuple[int, ...], Branch]
    pruned_mass: float = 0.0
    steps_done: int = 0

    def total_weight(self) -> float:
        return sum(b.weight for b in self.branches.values())

    def records(self) -> list[tuple[str, ...]]:
        return [b.labels for b in self.branches.values()]

    def get(self, labels: Sequence[str]) -> Branch:
        labels = tuple(str(l) for l in labels)
        for b in self.branches.values():
            if b.labels == labels:
                return b
        raise UnknownRecordError(
            f"record {labels} not in ledger (zero-probability or pruned)")

    def condition(self, labels: Sequence[str], registry: FactorRegistry
                  ) -> tuple[DensityOperator, float]:
        """Normalized conditional state and the record probability."""
        b = self.get(labels)
        p = b.weight
        if p <= 0:
            raise UnknownRecordError(f"record {tuple(labels)} has zero probability")
        op = OperatorMatrix(registry, b.support, b.state / p)
        return DensityOperator(op, 1.0), p

    def copy(self) -> "BranchLedger":
        return BranchLedger(self.time, dict(self.branches), self.pruned_mass,
                            self.steps_done)


@dataclass(frozen=True, eq=False)
class PrefixTrace:
    """Per-parent-branch record of one intervention."""

    labels: tuple[str, ...]
    weight: float
    state_pre: np.ndarray
    state_post_prep: np.ndarray
    state_post_ctrl: np.ndarray
    anc_pre: np.ndarray                      # ancilla state after control
    sa_pre: np.ndarray                       # system+ancillas state after control
    h_sys_at_meas: np.ndarray
    cond_probs: dict[str, float]
    anc_post: dict[str, np.ndarray]
    sa_post: dict[str, np.ndarray]
    w_ctrl_inc: float
    w_meas: dict[str, float]
    w_meas_alt: dict[str, float]


@dataclass(frozen=True, eq=False)
class StepTrace:
    """All conditioning data gathered while executing one step."""

    step: int
    time: float
    per_prefix: dict[tuple[int, ...], PrefixTrace]
    cat_offdiag: float | None = None         # recorded only under validation

    def average_work_gap(self) -> float:
        """| sum_r p(r) (w_meas - w_meas_alt) |, the convention gap."""
        total = 0.0
        for tr in self.per_prefix.values():
            for label, p in tr.cond_probs.items():
                total += tr.weight * p * (tr.w_meas[label] - tr.w_meas_alt[label])
        return abs(total)

    def max_branch_gap(self) -> float:
        gap = 0.0
        for tr in self.per_prefix.values():
            for label in tr.cond_probs:
                gap = max(gap, abs(tr.w_meas[label] - tr.w_meas_alt[label]))
        return gap


@dataclass(frozen=True, eq=False)
class Snapshot:
    time: float
    ledger: BranchLedger
    initial: bool = False


@dataclass(frozen=True, eq=False)
class RunResult:
    model: AutonomousModel
    initial: Snapshot
    snapshots: tuple[Snapshot, ...]
    traces: tuple[StepTrace, ...]
    final: BranchLedger
    control_caveat: bool = False


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

def _frozen(mat: np.ndarray) -> np.ndarray:
    mat = np.ascontiguousarray(mat)
    mat.setflags(write=False)
    return mat


class Simulator:
    """Drives a :class:`BranchLedger` through the scheduled interventions."""

    def __init__(self, model: AutonomousModel, prune: float = DEFAULT.prune,
                 validate_dephasing: bool = False, max_branches: int = 4096):
        self.model = model
        self.prune = float(prune)
        self.validate_dephasing = bool(validate_dephasing)
        self.max_branches = int(max_branches)

    # -- construction -------------------------------------------------------

    def initial_ledger(self) -> BranchLedger:
        model = self.model
        t0 = model.protocol.t_start
        seg = model.protocol.segment_at(t0)
        br = Branch(record=(), labels=(), state=_frozen(model.sb_init.mat),
                    support=model.registry.canonical(("S", "B")),
                    h_sys_applied=seg.h_system, window_applied=None)
        return BranchLedger(time=t0, branches={(): br})

    # -- evolution ----------------------------------------------------------

    def _advance_branch(self, br: Branch, t_from: float, t_to: float) -> Branch:
        model = self.model
        space = model.space(br.support)
        state = br.state
        weight = br.weight
        w_s, w_c = br.w_sys, br.w_ctrl
        h_app, win_app = br.h_sys_applied, br.window_applied
        for seg, a, b in model.protocol.iter_segments(t_from, t_to, br.labels):
            if weight > 0:
                if seg.h_system is not h_app:
                    rho_s = space.ptrace(state, ["S"])
                    w_s += float(np.real(np.trace(
                        (seg.h_system - h_app) @ rho_s))) / weight
                if seg.window is not win_app and (seg.window or win_app):
                    gain = 0.0
                    if seg.window is not None:
                        k, v = seg.window
                        rho = space.ptrace(state, ["S", ancilla_label(k)])
                        gain += float(np.real(np.trace(v @ rho)))
                    if win_app is not None:
                        k, v = win_app
                        rho = space.ptrace(state, ["S", ancilla_label(k)])
                        gain -= float(np.real(np.trace(v @ rho)))
                    w_c += gain / weight
            h_full = space.full_hamiltonian(seg.h_system, seg.window)
            u = expm_herm(h_full, -1j * (b - a))
            state = u @ state @ dagger(u)
            h_app, win_app = seg.h_system, seg.window
        return br.replace(state=_frozen(state), w_sys=w_s, w_ctrl=w_c,
                          h_sys_applied=h_app, window_applied=win_app)

    def _settle_branch(self, br: Branch, t: float) -> Branch:
        """Account for a protocol switch landing exactly at time t."""
        model = self.model
        seg = model.protocol.segment_at(t, br.labels)
        if seg.h_system is br.h_sys_applied and seg.window is br.window_applied:
            return br
        space = model.space(br.support)
        weight = br.weight
        w_s, w_c = br.w_sys, br.w_ctrl
        if weight > 0:
            if seg.h_system is not br.h_sys_applied:
                rho_s = space.ptrace(br.state, ["S"])
                w_s += float(np.real(np.trace(
                    (seg.h_system - br.h_sys_applied) @ rho_s))) / weight
            if seg.window is not br.window_applied:
                gain = 0.0
                if seg.window is not None:
                    k, v = seg.window
                    rho = space.ptrace(br.state, ["S", ancilla_label(k)])
                    gain += float(np.real(np.trace(v @ rho)))
                if br.window_applied is not None:
                    k, v = br.window_applied
                    rho = space.ptrace(br.state, ["S", ancilla_label(k)])
                    gain -= float(np.real(np.trace(v @ rho)))
                w_c += gain / weight
        return br.replace(w_sys=w_s, w_ctrl=w_c, h_sys_applied=seg.h_system,
                          window_applied=seg.window)

    def advance(self, ledger: BranchLedger, t: float) -> BranchLedger:
        if t < ledger.time - 1e-12:
            raise ValueError(f"cannot advance backwards from {ledger.time} to {t}")
        if t <= ledger.time + 1e-15:
            return ledger
        branches = {rec: self._advance_branch(br, ledger.time, t)
                    for rec, br in ledger.branches.items()}
        return BranchLedger(t, branches, ledger.pruned_mass, ledger.steps_done)

    # -- one intervention ---------------------------------------------------

    def run_step(self, ledger: BranchLedger, k: int) -> tuple[BranchLedger, StepTrace]:
        model = self.model
        spec = model.steps[k]
        if ledger.steps_done != k:
            raise ValueError(f"ledger has completed {ledger.steps_done} steps, "
                             f"cannot run step {k}")
        if abs(ledger.time - spec.time) > 1e-9:
            raise ValueError(f"step {k} is scheduled at t={spec.time}, "
                             f"ledger is at t={ledger.time}")
        anc = ancilla_label(k)
        new_branches: dict[tuple[int, ...], Branch] = {}
        traces: dict[tuple[int, ...], PrefixTrace] = {}
        pruned = ledger.pruned_mass
        cat_worst = 0.0 if self.validate_dephasing else None
        t_meas = spec.time if spec.window_width is None else spec.time + spec.window_width

        for rec, br in ledger.branches.items():
            hw = model.hardware(k, br.labels)
            weight = br.weight
            state_pre = br.state
            # --- preparation: fresh ancilla joins at the end of the support
            support2 = br.support + (anc,)
            prepped = br.replace(state=_frozen(np.kron(br.state, hw.ancilla_state)),
                                 support=support2)
            space = model.space(support2)
            # --- control
            if spec.window_width is None:
                u = space.embed(hw.unitary, ["S", anc])
                ctrl_state = u @ prepped.state @ dagger(u)
                w_ctrl_inc = self._kick_work(space, br.h_sys_applied, spec,
                                             prepped.state, ctrl_state, weight)
                ctrled = prepped.replace(state=_frozen(ctrl_state),
                                         w_ctrl=prepped.w_ctrl + w_ctrl_inc)
            else:
                ctrled = self._advance_branch(prepped, spec.time, t_meas)
                ctrled = self._settle_branch(ctrled, t_meas)
                w_ctrl_inc = ctrled.w_ctrl - prepped.w_ctrl
            # --- readout marginals before conditioning
            sa_labels = tuple(l for l in support2 if l != "B")
            anc_pre = space.ptrace(ctrled.state, [anc]) / weight
            sa_pre = space.ptrace(ctrled.state, sa_labels) / weight
            h_sa = self._sa_hamiltonian(ctrled.h_sys_applied, sa_labels, k)
            e_sa_pre = float(np.real(np.trace(h_sa @ sa_pre)))
            e_anc_pre = float(np.real(np.trace(spec.h_ancilla @ anc_pre)))
            if self.validate_dephasing:
                cat_worst = max(cat_worst, self._dephasing_residual(
                    space, ctrled.state, hw, anc, weight))
            # --- conditioning on the recorded outcome
            cond_probs: dict[str, float] = {}
            anc_post: dict[str, np.ndarray] = {}
            sa_post: dict[str, np.ndarray] = {}
            w_meas: dict[str, float] = {}
            w_meas_alt: dict[str, float] = {}
            for r, label in enumerate(hw.outcome_labels):
                proj = space.embed(hw.projectors[r], [anc])
                child_state = proj @ ctrled.state @ proj
                p_child = float(np.real(np.trace(child_state)))
                p_cond = p_child / weight if weight > 0 else 0.0
                cond_probs[label] = p_cond
                if p_child > 0:
                    anc_r = space.ptrace(child_state, [anc]) / p_child
                    sa_r = space.ptrace(child_state, sa_labels) / p_child
                else:
                    anc_r = np.zeros_like(anc_pre)
                    sa_r = np.zeros_like(sa_pre)
                anc_post[label] = anc_r
                sa_post[label] = sa_r
                w_meas[label] = float(np.real(np.trace(
                    spec.h_ancilla @ anc_r))) - e_anc_pre
                w_meas_alt[label] = float(np.real(np.trace(h_sa @ sa_r))) - e_sa_pre
                if p_child < self.prune:
                    pruned += p_child
                    continue
                child = ctrled.replace(
                    record=br.record + (r,), labels=br.labels + (label,),
                    state=_frozen(child_state),
                    w_meas=ctrled.w_meas + w_meas[label],
                    w_meas_alt=ctrled.w_meas_alt + w_meas_alt[label])
                new_branches[child.record] = child
            traces[rec] = PrefixTrace(
                labels=br.labels, weight=weight, state_pre=state_pre,
                state_post_prep=prepped.state, state_post_ctrl=ctrled.state,
                anc_pre=anc_pre, sa_pre=sa_pre,
                h_sys_at_meas=ctrled.h_sys_applied,
                cond_probs=cond_probs, anc_post=anc_post, sa_post=sa_post,
                w_ctrl_inc=w_ctrl_inc, w_meas=w_meas, w_meas_alt=w_meas_alt)

        if len(new_branches) > self.max_branches:
            raise RuntimeError(f"branch count {len(new_branches)} exceeds the "
                               f"limit {self.max_branches}")
        out = BranchLedger(t_meas, new_branches, pruned, steps_done=k + 1)
        return out, StepTrace(k, spec.time, traces, cat_offdiag=cat_worst)

    def _kick_work(self, space: _Space, h_sys: np.ndarray, spec: StepSpec,
                   before: np.ndarray, after: np.ndarray, weight: float) -> float:
        """Energy change of an instantaneous control, per unit weight.

        Includes the system-bath coupling term: with a delta-like control
        this is the only consistent bookkeeping, even though it is not
        accessible from system-ancilla records alone.
        """
        if weight <= 0:
            return 0.0
        model = self.model
        anc = ancilla_label(spec.index)
        delta = 0.0
        for op, labels in ((h_sys, ["S"]), (spec.h_ancilla, [anc]),
                           (model.v_coupling, ["S", "B"])):
            if op is None or max_norm(op) == 0:
                continue
            d_rho = space.ptrace(after, labels) - space.ptrace(before, labels)
            delta += float(np.real(np.trace(op @ d_rho)))
        return delta / weight

    def _sa_hamiltonian(self, h_sys: np.ndarray, sa_labels: tuple[str, ...],
                        k: int) -> np.ndarray:
        model = self.model
        dims = model.registry.dims(sa_labels)
        h = embed_factors(h_sys, [0], dims)
        for i in range(k + 1):
            label = ancilla_label(i)
            if label in sa_labels and max_norm(model.steps[i].h_ancilla) > 0:
                h = h + embed_factors(model.steps[i].h_ancilla,
                                      [sa_labels.index(label)], dims)
        return h

    def _dephasing_residual(self, space: _Space, state: np.ndarray,
                            hw: DilationResult, anc: str, weight: float) -> float:
        """Materialize the coherent register state, dephase it, and measure
        how far it is from the branch split.

        Before dephasing the register holds every cross term between
        outcomes; afterwards the off-diagonal register blocks must vanish
        and the diagonal ones must equal the conditioned branches.
        """
        if weight <= 0:
            return 0.0
        d_out = len(hw.projectors)
        d_branch = state.shape[0]
        reg0 = np.zeros((d_out, d_out), dtype=complex)
        reg0[0, 0] = 1.0
        u_meas = measurement_unitary([space.embed(p, [anc]) for p in hw.projectors])
        # u_meas acts on (branch-space, register)
        joint = u_meas @ np.kron(state, reg0) @ dagger(u_meas)
        # couple the register to a maximally mixed dephaser and trace it out
        u_deph = dephasing_unitary(d_out)
        big = np.kron(joint, np.eye(d_out, dtype=complex) / d_out)
        dims = [d_branch, d_out, d_out]
        u_big = embed_factors(u_deph, [1, 2], dims)
        big = u_big @ big @ dagger(u_big)
        after = ptrace_factors(big, dims, [0, 1])
        blocks = after.reshape(d_branch, d_out, d_branch, d_out)
        worst = 0.0
        for r in range(d_out):
            for rp in range(d_out):
                block = blocks[:, r, :, rp]
                if r == rp:
                    proj = space.embed(hw.projectors[r], [anc])
                    worst = max(worst, max_norm(block - proj @ state @ proj))
                else:
                    worst = max(worst, max_norm(block))
        return worst

    # -- full run -----------------------------------------------------------

    def run(self, report_times: Sequence[float] = ()) -> RunResult:
        model = self.model
        ledger = self.initial_ledger()
        initial = Snapshot(ledger.time, ledger.copy(), initial=True)
        times = sorted(set(float(t) for t in report_times))
        for t in times:
            if t < model.protocol.t_start - 1e-12 or t > model.protocol.t_end + 1e-12:
                raise ValueError(f"report time {t} outside the protocol range")
        snapshots: list[Snapshot] = []
        traces: list[StepTrace] = []
        k = 0

        def steps_until(t):
            nonlocal ledger, k
            while k < model.n_steps and model.steps[k].time <= t + 1e-12:
                ledger = self.advance(ledger, model.steps[k].time)
                ledger, tr = self.run_step(ledger, k)
                traces.append(tr)
                k += 1

        for t in times:
            steps_until(t)
            if ledger.time > t + 1e-12:
                raise ValueError(f"report time {t} falls inside a control window")
            ledger = self.advance(ledger, t)
            snapshots.append(Snapshot(t, ledger.copy()))
        steps_until(model.protocol.t_end)
        caveat = model.has_sb_coupling() and any(
            s.window_width is None for s in model.steps)
        return RunResult(model, initial, tuple(snapshots), tuple(traces), ledger,
                         control_caveat=caveat)


# ---------------------------------------------------------------------------
# spec-shaped helpers
# ---------------------------------------------------------------------------

def evolve_sb(model: AutonomousModel, state: DensityOperator, t_a: float,
              t_b: float, prefix: Sequence[str] = ()) -> DensityOperator:
    """Unitary evolution of a supported state under the driven Hamiltonian.

    Piecewise-constant segments are integrated exactly, one spectral
    exponential per segment; no work bookkeeping happens here.
    """
    if t_b < t_a - 1e-12:
        raise ValueError(f"reversed interval ({t_a}, {t_b})")
    support = state.support
    space = model.space(support)
    mat = state.mat
    for seg, a, b in model.protocol.iter_segments(t_a, t_b, prefix):
        window = seg.window
        if window is not None and ancilla_label(window[0]) not in support:
            raise ValueError("state does not hold the ancilla coupled in this window")
        u = expm_herm(space.full_hamiltonian(seg.h_system, window), -1j * (b - a))
        mat = u @ mat @ dagger(u)
    return DensityOperator(OperatorMatrix(model.registry, support, mat), state.weight)


def apply_instantaneous_control(state: DensityOperator,
                                u_ctrl: OperatorMatrix) -> DensityOperator:
    """Conjugate by a control unitary embedded into the state's support."""
    u = u_ctrl.embed(state.support) if u_ctrl.support != state.support else u_ctrl
    return DensityOperator(
        OperatorMatrix(state.op.registry, state.support, u.mat @ state.mat @ dagger(u.mat)),
        state.weight)
