"""Tests for CP maps, instruments, and direct multi-time evaluation."""

import numpy as np
import pytest

from proctherm.algebra import DensityOperator, FactorRegistry, OperatorMatrix, gibbs_state
from proctherm.channels import (
    CPMap,
    Instrument,
    InterventionSchedule,
    KrausChannel,
    apply_cp,
    evaluate_process_tensor,
    multilinearity_check,
)
from proctherm.protocol import Protocol, Segment

from oracles import apply_via_superoperator, random_density, random_hermitian, random_kraus_channel

P0 = np.array([[1, 0], [0, 0]], dtype=complex)
P1 = np.array([[0, 0], [0, 1]], dtype=complex)


def sb_registry(db=2):
    return FactorRegistry([("S", 2), ("B", db)])


def projective_z():
    return Instrument([("1", CPMap(("S",), [P0])), ("2", CPMap(("S",), [P1]))])


def identity_instrument():
    return Instrument([("1", CPMap(("S",), [np.eye(2)]))])


def flat_schedule(times, instruments, reg=None, h_sys=None, h_bath=None, v=None,
                  t_span=(0.0, 3.0), feedback=None):
    reg = reg or sb_registry()
    h_sys = np.zeros((2, 2)) if h_sys is None else h_sys
    proto = Protocol([Segment(t_span[0], t_span[1], h_sys)])
    return InterventionSchedule(reg, times, instruments, proto,
                                feedback=feedback, h_bath=h_bath, v_coupling=v)


class TestCPMap:
    def test_trace_preserving_validated(self):
        KrausChannel(("S",), [P0, P1])
        with pytest.raises(ValueError):
            KrausChannel(("S",), [P0])

    def test_identity_channel(self):
        reg = sb_registry()
        rho = DensityOperator(OperatorMatrix(reg, ("S",), np.diag([0.3, 0.7])))
        out = apply_cp(CPMap(("S",), [np.eye(2)]), rho)
        np.testing.assert_allclose(out.mat, rho.mat)
        assert out.weight == pytest.approx(1.0, abs=1e-14)

    def test_born_rule_on_diagonal_state(self):
        reg = sb_registry()
        rho = DensityOperator(OperatorMatrix(reg, ("S",), np.diag([0.3, 0.7])))
        out = apply_cp(CPMap(("S",), [P0]), rho)
        assert out.weight == pytest.approx(0.3, abs=1e-12)
        np.testing.assert_allclose(out.mat / out.weight, P0, atol=1e-12)

    def test_matches_superoperator_oracle(self):
        rng = np.random.default_rng(7)
        reg = sb_registry()
        kraus = random_kraus_channel(rng, 2, 3)
        rho = random_density(rng, 2)
        state = DensityOperator(OperatorMatrix(reg, ("S",), rho))
        # split into a 2-outcome instrument and compare each branch
        inst = Instrument([("1", CPMap(("S",), kraus[:1])), ("2", CPMap(("S",), kraus[1:]))])
        weights = []
        for label, cp in inst.outcomes:
            out = apply_cp(cp, state)
            np.testing.assert_allclose(out.mat, apply_via_superoperator(list(cp.kraus), rho),
                                       atol=1e-12)
            weights.append(out.weight)
        assert sum(weights) == pytest.approx(1.0, abs=1e-10)

    def test_embedded_application(self):
        rng = np.random.default_rng(8)
        reg = sb_registry()
        rho = random_density(rng, 4)
        state = DensityOperator(OperatorMatrix(reg, ("S", "B"), rho))
        out = apply_cp(CPMap(("S",), [P0]), state)
        np.testing.assert_allclose(out.mat, np.kron(P0, np.eye(2)) @ rho @ np.kron(P0, np.eye(2)),
                                   atol=1e-13)

    def test_support_mismatch_rejected(self):
        reg = sb_registry()
        rho = DensityOperator(OperatorMatrix(reg, ("S",), np.eye(2) / 2))
        with pytest.raises(ValueError):
            apply_cp(CPMap(("B",), [np.eye(2)]), rho)

    def test_complete_positivity_via_choi(self):
        rng = np.random.default_rng(9)
        kraus = random_kraus_channel(rng, 3, 2)
        assert CPMap(("S",), kraus).is_cp()


class TestInstrument:
    def test_alphabet_and_average(self):
        inst = projective_z()
        assert inst.labels == ("1", "2")
        assert inst.average().tp_residual() < 1e-12

    def test_non_tp_average_rejected(self):
        with pytest.raises(ValueError):
            Instrument([("1", CPMap(("S",), [P0])), ("2", CPMap(("S",), [0.5 * P1]))])

    def test_unknown_label(self):
        with pytest.raises(KeyError):
            projective_z().cp_map("3")


class TestScheduleValidation:
    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            flat_schedule([1.0, 0.5], [projective_z(), projective_z()])

    def test_feedback_prefix_length_checked(self):
        with pytest.raises(ValueError):
            flat_schedule([0.5], [projective_z()],
                          feedback={0: {("1",): projective_z()}})

    def test_feedback_alphabet_checked(self):
        other = Instrument([("a", CPMap(("S",), [P0])), ("b", CPMap(("S",), [P1]))])
        with pytest.raises(ValueError):
            flat_schedule([0.5, 1.0], [projective_z(), projective_z()],
                          feedback={1: {("1",): other}})


class TestProcessEvaluation:
    def test_gibbs_stationarity_no_interventions(self):
        # global thermal state of the joint Hamiltonian is invariant
        rng = np.random.default_rng(20)
        reg = sb_registry()
        h_s = np.diag([0.0, 1.0])
        h_b = random_hermitian(rng, 2)
        v = 0.4 * np.kron(np.array([[0, 1], [1, 0]]), np.array([[0, 1], [1, 0]]))
        sched = flat_schedule([], [], h_sys=h_s, h_bath=h_b, v=v)
        h_sb = OperatorMatrix(reg, ("S", "B"), sched.h_sb(h_s))
        pi_sb, _ = gibbs_state(h_sb, beta=1.0)
        out = evaluate_process_tensor(sched, (), pi_sb, t=2.5)
        from proctherm.algebra import partial_trace
        np.testing.assert_allclose(out.mat, partial_trace(pi_sb, ["S"]).mat, atol=1e-11)
        assert out.weight == pytest.approx(1.0, abs=1e-11)

    def test_identity_intervention_is_bare_evolution(self):
        rng = np.random.default_rng(21)
        reg = sb_registry()
        h_s = random_hermitian(rng, 2)
        h_b = random_hermitian(rng, 2)
        v = 0.3 * random_hermitian(rng, 4)
        rho0 = random_density(rng, 4)
        sb = DensityOperator(OperatorMatrix(reg, ("S", "B"), rho0))
        sched0 = flat_schedule([], [], h_sys=h_s, h_bath=h_b, v=v)
        sched1 = flat_schedule([1.0], [identity_instrument()], h_sys=h_s, h_bath=h_b, v=v)
        bare = evaluate_process_tensor(sched0, (), sb, t=2.0)
        with_id = evaluate_process_tensor(sched1, ("1",), sb, t=2.0)
        np.testing.assert_allclose(with_id.mat, bare.mat, atol=0)  # same matrix path

    def test_matches_kraus_sequence_oracle(self):
        # driven qubit + qubit bath, two unsharp interventions
        rng = np.random.default_rng(22)
        reg = sb_registry()
        h0, h1 = np.diag([0.0, 1.0]), np.diag([0.0, 1.0]) + 0.3 * np.array([[0, 1], [1, 0]])
        h_b = np.diag([0.0, 0.8])
        v = 0.25 * np.kron(np.array([[0, 1], [1, 0]]), np.array([[0, 1], [1, 0]]))
        proto = Protocol([Segment(0.0, 0.8, h0), Segment(0.8, 2.0, h1)])
        k1 = [np.sqrt(0.8) * P0 + np.sqrt(0.2) * P1]
        k2 = [np.sqrt(0.2) * P0 + np.sqrt(0.8) * P1]
        unsharp = Instrument([("1", CPMap(("S",), k1)), ("2", CPMap(("S",), k2))])
        sched = InterventionSchedule(reg, [0.5, 1.2], [unsharp, projective_z()], proto,
                                     h_bath=h_b, v_coupling=v)
        rho0 = random_density(rng, 4)
        sb = DensityOperator(OperatorMatrix(reg, ("S", "B"), rho0))

        def u_sb(ta, tb):
            from proctherm.algebra import expm_herm
            out = np.eye(4, dtype=complex)
            for seg, a, b in proto.iter_segments(ta, tb):
                out = expm_herm(sched.h_sb(seg.h_system), -1j * (b - a)) @ out
            return out

        total = 0.0
        for ra, cpa in unsharp.outcomes:
            for rb, cpb in projective_z().outcomes:
                got = evaluate_process_tensor(sched, (ra, rb), sb, t=2.0)
                # oracle: enumerate Kraus sequences explicitly
                expected = np.zeros((4, 4), dtype=complex)
                u01, u12, u2f = u_sb(0.0, 0.5), u_sb(0.5, 1.2), u_sb(1.2, 2.0)
                for ka in cpa.kraus:
                    for kb in cpb.kraus:
                        ea, eb = np.kron(ka, np.eye(2)), np.kron(kb, np.eye(2))
                        m = u2f @ eb @ u12 @ ea @ u01 @ rho0 @ u01.conj().T @ ea.conj().T \
                            @ u12.conj().T @ eb.conj().T @ u2f.conj().T
                        expected += m
                expected_s = expected.reshape(2, 2, 2, 2).trace(axis1=1, axis2=3)
                np.testing.assert_allclose(got.mat, expected_s, atol=1e-11)
                total += got.weight
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_record_length_validated(self):
        sched = flat_schedule([0.5], [projective_z()])
        with pytest.raises(ValueError):
            evaluate_process_tensor(sched, (), _gibbs_sb(sched), t=1.0)
        with pytest.raises(KeyError):
            evaluate_process_tensor(sched, ("9",), _gibbs_sb(sched), t=1.0)

    def test_feedback_selects_instrument(self):
        # step 1 measures X if r0 = "1", Z otherwise; compare by hand
        rng = np.random.default_rng(23)
        reg = sb_registry()
        plus = np.array([[0.5, 0.5], [0.5, 0.5]], dtype=complex)
        minus = np.array([[0.5, -0.5], [-0.5, 0.5]], dtype=complex)
        x_inst = Instrument([("1", CPMap(("S",), [plus])), ("2", CPMap(("S",), [minus]))])
        sched = flat_schedule([0.4, 0.9], [projective_z(), projective_z()],
                              feedback={1: {("1",): x_inst}})
        rho0 = random_density(rng, 4)
        sb = DensityOperator(OperatorMatrix(reg, ("S", "B"), rho0))
        got = evaluate_process_tensor(sched, ("1", "1"), sb, t=1.5)
        e0 = np.kron(P0, np.eye(2))
        eplus = np.kron(plus, np.eye(2))
        expected = eplus @ e0 @ rho0 @ e0 @ eplus   # zero Hamiltonian: no evolution
        expected_s = expected.reshape(2, 2, 2, 2).trace(axis1=1, axis2=3)
        np.testing.assert_allclose(got.mat, expected_s, atol=1e-12)


def _gibbs_sb(sched, beta=1.0):
    h = OperatorMatrix(sched.registry, ("S", "B"),
                       sched.h_sb(sched.protocol.base[0].h_system))
    return gibbs_state(h, beta)[0]


class TestMultilinearity:
    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        reg = sb_registry()
        sched = flat_schedule([0.4, 1.0], [identity_instrument(), identity_instrument()],
                              h_sys=random_hermitian(rng, 2),
                              h_bath=random_hermitian(rng, 2),
                              v=0.3 * random_hermitian(rng, 4))
        ops_a = [CPMap(("S",), random_kraus_channel(rng, 2, 2)) for _ in range(2)]
        ops_b = [CPMap(("S",), random_kraus_channel(rng, 2, 2)) for _ in range(2)]
        sb = DensityOperator(OperatorMatrix(reg, ("S", "B"), random_density(rng, 4)))
        return sched, ops_a, ops_b, sb

    @pytest.mark.parametrize("alpha", [1.0, 0.0, 0.37])
    def test_linearity_per_slot(self, alpha):
        sched, ops_a, ops_b, sb = self._setup(31)
        ok, dev = multilinearity_check(sched, ops_a, ops_b, alpha, sb, t=1.5)
        assert ok, f"deviation {dev}"
        assert dev < 1e-10
