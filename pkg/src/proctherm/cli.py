"""Command-line interface.

Subcommands: ``run`` (simulate and report), ``verify`` (pass/fail check
table), ``equiv`` (autonomous vs direct route only), ``dilate`` (dump the
synthesized hardware of one step).  Exit codes: 0 success, 1 check
failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .report import bundle_from_run
from .scenario import ScenarioError, build_model, parse_scenario
from .simulate import Simulator
from .thermo import evaluate_run
from .tolerances import DEFAULT
from .verify import equivalence_rows, run_verified, verify_model

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT_ERROR = 0, 1, 2


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ScenarioError("--tol-override", f"expected k=v, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise ScenarioError("--tol-override",
                                f"{value!r} is not a number") from None
    return out


def _common_flags(p):
    p.add_argument("--scenario", required=True, help="scenario file (YAML)")
    p.add_argument("--out", default=None, help="output directory for reports")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for randomized verification probes")
    p.add_argument("--tol-override", action="append", metavar="K=V",
                   help="override a named tolerance (repeatable)")
    p.add_argument("--max-branches", type=int, default=4096)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="proctherm",
        description="Simulate quantum causal models autonomously and check "
                    "their trajectory thermodynamics.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="simulate and emit the report bundle")
    _common_flags(p_run)
    p_run.add_argument("--mode", choices=["autonomous", "process-tensor", "both"],
                       default="autonomous")
    p_ver = sub.add_parser("verify", help="run every invariant suite")
    _common_flags(p_ver)
    p_eq = sub.add_parser("equiv", help="compare the two evaluation routes")
    _common_flags(p_eq)
    p_dil = sub.add_parser("dilate", help="dump the dilation of one step")
    _common_flags(p_dil)
    p_dil.add_argument("--step", type=int, default=0)
    return parser


def _load(args):
    scenario = parse_scenario(args.scenario)
    model = build_model(scenario)
    tol = DEFAULT.replaced(**_parse_overrides(args.tol_override))
    prune = float(scenario.options.get("prune_threshold", tol.prune))
    return scenario, model, tol, prune


def cmd_run(args) -> int:
    scenario, model, tol, prune = _load(args)
    caveat_flagged = False
    if args.mode == "process-tensor":
        # direct route: enumerate records at each report time
        from .channels import evaluate_process_tensor

        rows = []
        for t in scenario.report_times:
            n = sum(1 for tk in model.schedule.times if tk <= t + 1e-12)
            for labels in model.schedule.records(n):
                out = evaluate_process_tensor(model.schedule, labels,
                                              model.sb_init, t=t)
                if out.weight < prune:
                    continue
                rows.append({"time": t, "record": "|".join(labels) or "-",
                             "p": out.weight})
        doc = {"scenario": scenario.name, "mode": args.mode, "seed": args.seed,
               "scenario_checksum": scenario.checksum, "records": rows}
        text = json.dumps(doc, sort_keys=True, indent=2)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "report.json").write_text(text, encoding="utf-8")
        else:
            print(text)
        return EXIT_OK

    result = Simulator(model, prune=prune,
                       max_branches=args.max_branches).run(scenario.report_times)
    ledger = evaluate_run(result)
    equivalence = None
    status = EXIT_OK
    if args.mode == "both":
        equivalence = equivalence_rows(model, result)
        worst_s = max((r["state_dev"] for r in equivalence), default=0.0)
        worst_p = max((r["prob_dev"] for r in equivalence), default=0.0)
        if worst_s > tol.equivalence_state or worst_p > tol.equivalence_prob:
            status = EXIT_CHECK_FAILED
    bundle = bundle_from_run(result, ledger, mode=args.mode, seed=args.seed,
                             checksum=scenario.checksum, tolerances=tol,
                             equivalence=equivalence)
    if bundle.control_caveat:
        caveat_flagged = True
    if args.out:
        for path in bundle.write(args.out):
            print(f"wrote {path}")
    else:
        print(bundle.to_json())
    if caveat_flagged:
        print(f"note: {bundle.control_caveat}", file=sys.stderr)
    return status


def cmd_verify(args) -> int:
    scenario, model, tol, prune = _load(args)
    result = run_verified(model, scenario.report_times, prune=prune,
                          max_branches=args.max_branches)
    ledger = evaluate_run(result)
    rng = np.random.default_rng(args.seed)
    checks = verify_model(model, result, ledger, tol=tol, rng=rng)
    width = max(len(c.name) for c in checks)
    for c in checks:
        line = (f"{c.name:<{width}}  value={c.value:.3e}  "
                f"tol={c.tolerance:.1e}  "
                f"{'pass' if c.passed else 'FAIL'}")
        if c.note:
            line += f"  ({c.note})"
        print(line)
    if args.out:
        bundle = bundle_from_run(result, ledger, mode="verify", seed=args.seed,
                                 checksum=scenario.checksum, tolerances=tol,
                                 checks=[c.row() for c in checks])
        for path in bundle.write(args.out):
            print(f"wrote {path}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK_FAILED


def cmd_equiv(args) -> int:
    scenario, model, tol, prune = _load(args)
    if any(s.window_width is not None for s in model.steps):
        print("error: equivalence is defined for instantaneous controls only",
              file=sys.stderr)
        return EXIT_INPUT_ERROR
    result = Simulator(model, prune=prune,
                       max_branches=args.max_branches).run(scenario.report_times)
    rows = equivalence_rows(model, result)
    worst_s = max((r["state_dev"] for r in rows), default=0.0)
    worst_p = max((r["prob_dev"] for r in rows), default=0.0)
    for r in rows:
        print(f"t={r['time']:<8g} record={r['record']:<16} "
              f"state_dev={r['state_dev']:.3e} prob_dev={r['prob_dev']:.3e}")
    print(f"worst: state {worst_s:.3e} (tol {tol.equivalence_state:.1e}), "
          f"probability {worst_p:.3e} (tol {tol.equivalence_prob:.1e})")
    if args.out:
        doc = {"scenario": scenario.name, "seed": args.seed,
               "scenario_checksum": scenario.checksum, "rows": rows,
               "worst_state_dev": worst_s, "worst_prob_dev": worst_p}
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "equivalence.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")
    ok = worst_s <= tol.equivalence_state and worst_p <= tol.equivalence_prob
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_dilate(args) -> int:
    scenario, model, tol, _ = _load(args)
    if not 0 <= args.step < model.n_steps:
        print(f"error: scenario has {model.n_steps} step(s), no index {args.step}",
              file=sys.stderr)
        return EXIT_INPUT_ERROR
    hw = model.hardware(args.step, ())
    inst = model.schedule.instrument_at(args.step, ())
    from .algebra import dagger, max_norm
    from .dilation import apply_dilated

    rec_err = 0.0
    for r, (label, cp) in enumerate(inst.outcomes):
        for i in range(hw.system_dim):
            e = np.zeros((hw.system_dim, hw.system_dim), dtype=complex)
            e[i, i] = 1.0
            direct = sum(k @ e @ dagger(k) for k in cp.kraus)
            rec_err = max(rec_err, max_norm(apply_dilated(hw, e, outcome=r) - direct))
    doc = {
        "scenario": scenario.name,
        "step": args.step,
        "ancilla_dim": hw.ancilla_dim,
        "outcome_labels": list(hw.outcome_labels),
        "unitarity_residual": hw.unitarity_residual(),
        "reconstruction_error_diagonal_basis": rec_err,
        "unitary": _complex_rows(hw.unitary),
        "projectors": [_complex_rows(p) for p in hw.projectors],
        "ancilla_state": _complex_rows(hw.ancilla_state),
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"dilation_step{args.step}.json").write_text(
            text, encoding="utf-8")
    else:
        print(text)
    ok = (hw.unitarity_residual() <= tol.dilation_unitary
          and rec_err <= tol.dilation_reconstruction)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _complex_rows(mat: np.ndarray) -> list[list[str]]:
    return [[f"{v.real!r}{'+' if v.imag >= 0 else '-'}{abs(v.imag)!r}i"
             for v in row] for row in np.asarray(mat, dtype=complex)]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "verify": cmd_verify,
                "equiv": cmd_equiv, "dilate": cmd_dilate}
    try:
        return handlers[args.command](args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
