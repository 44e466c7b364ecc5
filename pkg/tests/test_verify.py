"""Tests for the verification suite itself."""

import numpy as np
import pytest

from proctherm.scenario import build_model, parse_scenario_dict
from proctherm.simulate import Simulator
from proctherm.thermo import evaluate_run
from proctherm.tolerances import DEFAULT, Tolerances
from proctherm.verify import run_verified, verify_model


def scenario_dict():
    return {
        "name": "verify-me",
        "beta": 1.0,
        "system": {"dim": 2},
        "bath": {"dim": 2, "hamiltonian": {"diag": [0.0, 1.0]}},
        "coupling": {"pauli": "XX", "coeff": 0.4},
        "system_hamiltonian": {"diag": [0.0, 1.0]},
        "time": {"start": 0.0, "end": 1.5},
        "report_times": [0.7, 1.5],
        "steps": [
            {"time": 0.4, "instrument": {"outcomes": [
                {"label": "1", "kraus": [[[1.0, 0.0], [0.0, 0.0]]]},
                {"label": "2", "kraus": [[[0.0, 0.0], [0.0, 1.0]]]}]}},
        ],
    }


class TestVerifySuite:
    def test_all_checks_pass_and_are_named(self):
        model = build_model(parse_scenario_dict(scenario_dict()))
        result = run_verified(model, [0.7, 1.5], prune=1e-14, max_branches=256)
        checks = verify_model(model, result, rng=np.random.default_rng(0))
        names = {c.name for c in checks}
        for expected in ("kraus-trace-preserving", "complete-positivity",
                         "dilation-unitarity", "dilation-reconstruction",
                         "dephasing-placement", "dephasing-zero-cost",
                         "record-probabilities-sum", "branch-positivity",
                         "equivalence-states", "equivalence-probabilities",
                         "first-law", "work-energy-budget",
                         "work-convention-average", "second-law-positivity",
                         "entropy-production-forms"):
            assert expected in names
        assert all(c.passed for c in checks)
        for c in checks:
            row = c.row()
            assert row["verdict"] == "pass"

    def test_impossible_tolerance_yields_failure(self):
        model = build_model(parse_scenario_dict(scenario_dict()))
        result = run_verified(model, [1.5], prune=1e-14, max_branches=256)
        tight = DEFAULT.replaced(prob_total=0.0, sigma_forms=0.0)
        checks = verify_model(model, result, tol=tight,
                              rng=np.random.default_rng(0))
        failed = {c.name for c in checks if not c.passed}
        assert failed == {"record-probabilities-sum", "entropy-production-forms"}

    def test_determinism_with_fixed_seed(self):
        model = build_model(parse_scenario_dict(scenario_dict()))
        result = run_verified(model, [1.5], prune=1e-14, max_branches=256)
        a = verify_model(model, result, rng=np.random.default_rng(42))
        b = verify_model(model, result, rng=np.random.default_rng(42))
        assert [(c.name, c.value) for c in a] == [(c.name, c.value) for c in b]

    def test_window_scenario_skips_equivalence(self):
        data = scenario_dict()
        data["steps"][0]["window"] = {"width": 0.05}
        model = build_model(parse_scenario_dict(data))
        result = run_verified(model, [1.5], prune=1e-14, max_branches=256)
        checks = verify_model(model, result, rng=np.random.default_rng(0))
        names = {c.name for c in checks}
        assert "equivalence-states" not in names
        assert all(c.passed for c in checks)


class TestTolerances:
    def test_replace_and_reject(self):
        tol = Tolerances().replaced(first_law=1e-6)
        assert tol.first_law == 1e-6
        with pytest.raises(KeyError):
            Tolerances().replaced(bogus=1.0)
        assert "first_law" in tol.as_dict()
