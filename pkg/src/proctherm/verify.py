"""Verification suites: every identity the package asserts, as a pass/fail
table over one scenario run.

Checks cover probability normalization, complete positivity, dilation
unitarity and reconstruction, the coherent-register dephasing placement and
its zero energy cost, the autonomous/direct dynamical equivalence, the
first law at branch and ensemble level backed by an independent global
energy budget, both entropy-production forms, and the average agreement of
the two measurement-work conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import dagger, max_norm, ptrace_factors
from .channels import evaluate_process_tensor
from .dilation import apply_dilated, dephasing_unitary
from .simulate import AutonomousModel, RunResult, Simulator
from .thermo import ThermoLedger, evaluate_run
from .tolerances import DEFAULT, Tolerances

__all__ = ["CheckResult", "verify_model", "equivalence_rows", "run_verified"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""

    def row(self) -> dict:
        return {"name": self.name, "value": self.value,
                "tolerance": self.tolerance,
                "verdict": "pass" if self.passed else "FAIL",
                "note": self.note}


def _check(name: str, value: float, tol: float, note: str = "") -> CheckResult:
    return CheckResult(name, float(value), float(tol), bool(value <= tol), note)


def equivalence_rows(model: AutonomousModel, result: RunResult) -> list[dict]:
    """Per-snapshot, per-record deviation between the two evaluation routes."""
    rows = []
    for snap in result.snapshots:
        for br in snap.ledger.branches.values():
            direct = evaluate_process_tensor(model.schedule, br.labels,
                                             model.sb_init, t=snap.time)
            dims = model.registry.dims(br.support)
            got = ptrace_factors(br.state, dims, [0])
            rows.append({
                "time": snap.time,
                "record": "|".join(br.labels) or "-",
                "state_dev": max_norm(got - direct.mat),
                "prob_dev": abs(br.weight - direct.weight)})
    return rows


def run_verified(model: AutonomousModel, report_times, *, prune: float,
                 max_branches: int) -> RunResult:
    sim = Simulator(model, prune=prune, validate_dephasing=True,
                    max_branches=max_branches)
    return sim.run(report_times=report_times)


def verify_model(model: AutonomousModel, result: RunResult,
                 ledger: ThermoLedger | None = None,
                 tol: Tolerances = DEFAULT,
                 rng: np.random.Generator | None = None) -> list[CheckResult]:
    """Run every check suite over a finished (validated) run."""
    rng = rng or np.random.default_rng(0)
    ledger = ledger if ledger is not None else evaluate_run(result)
    checks: list[CheckResult] = []

    # --- instruments: complete positivity and trace preservation
    worst_tp, worst_cp = 0.0, 0.0
    for k in range(model.n_steps):
        for inst in model.schedule.all_variants(k):
            worst_tp = max(worst_tp, inst.average().tp_residual())
            for _, cp in inst.outcomes:
                worst_cp = max(worst_cp, -float(np.linalg.eigvalsh(cp.choi())[0]))
    checks.append(_check("kraus-trace-preserving", worst_tp, tol.kraus_tp))
    checks.append(_check("complete-positivity", max(worst_cp, 0.0), tol.choi_psd))

    # --- dilations: unitarity and instrument reconstruction
    worst_u, worst_rec = 0.0, 0.0
    for k in range(model.n_steps):
        prefixes = [()] + list(model.schedule.feedback.get(k, {}).keys())
        for prefix in prefixes:
            hw = model.hardware(k, prefix)
            inst = model.schedule.instrument_at(k, prefix)
            worst_u = max(worst_u, hw.unitarity_residual())
            comp = sum(hw.projectors)
            worst_u = max(worst_u, max_norm(comp - np.eye(hw.ancilla_dim)))
            for r, (label, cp) in enumerate(inst.outcomes):
                for e in _basis(hw.system_dim):
                    direct = sum(kk @ e @ dagger(kk) for kk in cp.kraus)
                    worst_rec = max(worst_rec, max_norm(
                        apply_dilated(hw, e, outcome=r) - direct))
    checks.append(_check("dilation-unitarity", worst_u, tol.dilation_unitary))
    checks.append(_check("dilation-reconstruction", worst_rec,
                         tol.dilation_reconstruction))

    # --- memory: register coherences killed exactly where promised
    if result.traces and result.traces[0].cat_offdiag is not None:
        worst_cat = max(tr.cat_offdiag for tr in result.traces)
        checks.append(_check("dephasing-placement", worst_cat, tol.trace))

    # --- memory: dephasing costs no energy, any register size
    worst_cost = 0.0
    dims = sorted({len(model.schedule.alphabet(k)) for k in range(model.n_steps)}) or [2]
    for d in dims:
        u = dephasing_unitary(d)
        h = 0.9 * np.eye(d * d)  # degenerate register + dephaser energies
        for _ in range(20):
            a = rng.standard_normal((d * d, d * d)) + 1j * rng.standard_normal((d * d, d * d))
            rho = a @ a.conj().T
            rho = rho / np.trace(rho)
            cost = abs(np.trace(h @ (u @ rho @ dagger(u) - rho)))
            worst_cost = max(worst_cost, float(cost.real))
    checks.append(_check("dephasing-zero-cost", worst_cost, tol.dephasing_cost))

    # --- probability bookkeeping
    p_err = abs(result.final.total_weight() + result.final.pruned_mass - 1.0)
    checks.append(_check("record-probabilities-sum", p_err, tol.prob_total))
    worst_neg = 0.0
    for br in result.final.branches.values():
        worst_neg = max(worst_neg, -float(np.linalg.eigvalsh(br.state)[0]))
    checks.append(_check("branch-positivity", max(worst_neg, 0.0), tol.psd))

    # --- dynamical equivalence (instantaneous controls only)
    if all(s.window_width is None for s in model.steps):
        rows = equivalence_rows(model, result)
        sdev = max((r["state_dev"] for r in rows), default=0.0)
        pdev = max((r["prob_dev"] for r in rows), default=0.0)
        checks.append(_check("equivalence-states", sdev, tol.equivalence_state))
        checks.append(_check("equivalence-probabilities", pdev, tol.equivalence_prob))

    # --- first law, per branch and ensemble, plus the energy budget
    worst_fl = 0.0
    for t, rows in ledger.branch_rows.items():
        for r in rows:
            worst_fl = max(worst_fl, abs(r.q - (r.du - r.w)),
                           abs(r.q_alt - (r.du - r.w_alt)))
    budget = 0.0
    for row in ledger.ensemble_rows:
        worst_fl = max(worst_fl, abs(row.q - (row.du - row.w)))
        budget = max(budget, abs(row.w - row.w_budget))
    checks.append(_check("first-law", worst_fl, tol.first_law))
    checks.append(_check("work-energy-budget", budget, tol.first_law))

    # --- measurement-work conventions agree on average
    worst_gap = max((tr.average_work_gap() for tr in result.traces), default=0.0)
    checks.append(_check("work-convention-average", worst_gap,
                         tol.convention_average))

    # --- second law, both forms
    if model.gibbs_initial:
        neg = max((-row.sigma_first_law for row in ledger.ensemble_rows),
                  default=0.0)
        checks.append(_check("second-law-positivity", max(neg, 0.0),
                             tol.second_law))
        if not model.mean_force_bare:
            gap = max((abs(row.sigma_first_law - row.sigma_rel_ent)
                       for row in ledger.ensemble_rows), default=0.0)
            checks.append(_check("entropy-production-forms", gap,
                                 tol.sigma_forms))
        else:
            checks.append(CheckResult(
                "entropy-production-forms", 0.0, tol.sigma_forms, True,
                note="skipped: bare mean-force mode has no exact "
                     "relative-entropy reference"))
    else:
        checks.append(CheckResult(
            "second-law-positivity", 0.0, tol.second_law, True,
            note="skipped: non-thermal initial system-bath state voids the "
                 "guarantee"))
    return checks


def _basis(d: int):
    for i in range(d):
        for j in range(d):
            e = np.zeros((d, d), dtype=complex)
            e[i, j] = 1.0
            yield e
