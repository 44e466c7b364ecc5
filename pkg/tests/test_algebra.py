"""Tests for the labelled-factor linear algebra layer."""

import math

import numpy as np
import pytest

from proctherm.algebra import (
    DensityOperator,
    FactorRegistry,
    OperatorMatrix,
    gibbs_state,
    herm_exp,
    max_norm,
    partial_trace,
    relative_entropy,
    tensor,
    unitary_log_generator,
    von_neumann_entropy,
)

from oracles import (
    kron_index,
    ptrace_index,
    random_density,
    random_hermitian,
    random_unitary,
    taylor_expm,
)

SX = np.array([[0, 1], [1, 0]], dtype=complex)


def two_factor_registry():
    return FactorRegistry([("S", 2), ("B", 2)])


def op(reg, support, mat):
    return OperatorMatrix(reg, support, mat)


def dens(reg, support, mat, weight=None):
    return DensityOperator(OperatorMatrix(reg, support, mat), weight)


# ---------------------------------------------------------------------------
# registry / wrapper plumbing
# ---------------------------------------------------------------------------

class TestRegistry:
    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            FactorRegistry([("S", 2), ("S", 3)])

    def test_nonpositive_dim_rejected(self):
        with pytest.raises(ValueError):
            FactorRegistry([("S", 0)])

    def test_canonical_order(self):
        reg = FactorRegistry([("S", 2), ("B", 3), ("A0", 2)])
        assert reg.canonical(["A0", "S"]) == ("S", "A0")
        assert reg.total_dim() == 12
        with pytest.raises(KeyError):
            reg.canonical(["Q"])

    def test_operator_shape_checked(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            OperatorMatrix(reg, ("S",), np.eye(3))

    def test_hermitian_flag_checked(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            OperatorMatrix(reg, ("S",), [[0, 1], [0, 0]], hermitian=True)
        OperatorMatrix(reg, ("S",), SX, hermitian=True)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

class TestTensor:
    def test_identity_case(self):
        reg = two_factor_registry()
        out = tensor(OperatorMatrix.identity(reg, ["S"]), OperatorMatrix.identity(reg, ["B"]))
        np.testing.assert_allclose(out.mat, np.eye(4))

    def test_basis_projectors(self):
        reg = two_factor_registry()
        out = tensor(op(reg, ("S",), np.diag([1, 0])), op(reg, ("B",), np.diag([0, 1])))
        np.testing.assert_allclose(out.mat, np.diag([0, 1, 0, 0]))

    def test_matches_index_oracle(self):
        reg = two_factor_registry()
        rng = np.random.default_rng(11)
        a, b = random_hermitian(rng, 2), random_hermitian(rng, 2)
        out = tensor(op(reg, ("S",), a), op(reg, ("B",), b))
        np.testing.assert_allclose(out.mat, kron_index(a, b), atol=1e-13)

    def test_registry_order_restored(self):
        # composing in reverse label order must permute back to S (x) B
        reg = two_factor_registry()
        rng = np.random.default_rng(12)
        a, b = random_hermitian(rng, 2), random_hermitian(rng, 2)
        out = tensor(op(reg, ("B",), b), op(reg, ("S",), a))
        np.testing.assert_allclose(out.mat, np.kron(a, b), atol=1e-13)

    def test_overlap_rejected(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            tensor(op(reg, ("S",), SX), op(reg, ("S",), SX))

    def test_mismatched_registries_rejected(self):
        rega, regb = two_factor_registry(), FactorRegistry([("S", 2), ("B", 3)])
        with pytest.raises(ValueError):
            tensor(op(rega, ("S",), SX), op(regb, ("B",), np.eye(3)))


# ---------------------------------------------------------------------------
# partial trace
# ---------------------------------------------------------------------------

class TestPartialTrace:
    def test_product_state(self):
        reg = two_factor_registry()
        rng = np.random.default_rng(21)
        rho_s, rho_b = random_density(rng, 2), random_density(rng, 2)
        joint = dens(reg, ("S", "B"), np.kron(rho_s, rho_b))
        out = partial_trace(joint, ["S"])
        np.testing.assert_allclose(out.mat, rho_s, atol=1e-13)
        assert out.support == ("S",)

    def test_maximally_entangled(self):
        reg = two_factor_registry()
        psi = np.zeros(4, dtype=complex)
        psi[0] = psi[3] = 1 / math.sqrt(2)
        joint = dens(reg, ("S", "B"), np.outer(psi, psi.conj()))
        out = partial_trace(joint, ["B"])
        np.testing.assert_allclose(out.mat, np.eye(2) / 2, atol=1e-14)

    def test_matches_index_oracle(self):
        reg = FactorRegistry([("S", 2), ("B", 3), ("A0", 2)])
        rng = np.random.default_rng(22)
        rho = random_density(rng, 12)
        joint = dens(reg, ("S", "B", "A0"), rho)
        out = partial_trace(joint, ["S", "A0"])
        expected = ptrace_index(rho, [2, 3, 2], [0, 2])
        np.testing.assert_allclose(out.mat, expected, atol=1e-13)
        assert abs(out.weight - 1.0) < 1e-12

    def test_trace_preserved(self):
        reg = FactorRegistry([("S", 2), ("B", 4)])
        rng = np.random.default_rng(23)
        rho = random_density(rng, 8)
        out = partial_trace(dens(reg, ("S", "B"), rho), ["B"])
        assert abs(np.trace(out.mat) - 1.0) < 1e-12

    def test_unknown_label(self):
        reg = two_factor_registry()
        with pytest.raises(KeyError):
            partial_trace(dens(reg, ("S",), np.eye(2) / 2), ["B"])


# ---------------------------------------------------------------------------
# Hermitian exponential
# ---------------------------------------------------------------------------

class TestHermExp:
    def test_zero_time(self):
        reg = two_factor_registry()
        rng = np.random.default_rng(31)
        h = op(reg, ("S",), random_hermitian(rng, 2))
        np.testing.assert_allclose(herm_exp(h, 0.0).mat, np.eye(2), atol=1e-15)

    def test_pauli_x_quarter_period(self):
        # exp(-i pi/2 X) = -i X, exactly in the spectral form
        reg = two_factor_registry()
        out = herm_exp(op(reg, ("S",), SX), -1j * math.pi / 2)
        np.testing.assert_allclose(out.mat, -1j * SX, atol=1e-15)

    def test_matches_taylor_oracle(self):
        reg = FactorRegistry([("S", 4)])
        rng = np.random.default_rng(32)
        h = random_hermitian(rng, 4)
        out = herm_exp(op(reg, ("S",), h), -0.7j)
        np.testing.assert_allclose(out.mat, taylor_expm(-0.7j * h), atol=1e-10)

    def test_unitary_for_imaginary_scale(self):
        reg = FactorRegistry([("S", 5)])
        rng = np.random.default_rng(33)
        for _ in range(20):
            h = random_hermitian(rng, 5, scale=3.0)
            u = herm_exp(op(reg, ("S",), h), -1.3j).mat
            assert max_norm(u @ u.conj().T - np.eye(5)) < 1e-11

    def test_non_hermitian_rejected(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            herm_exp(op(reg, ("S",), [[0, 1], [0, 0]]), -1j)

    def test_unitary_log_generator_roundtrip(self):
        rng = np.random.default_rng(34)
        for d in (2, 4):
            u = random_unitary(rng, d)
            g = unitary_log_generator(u)
            assert max_norm(g - g.conj().T) < 1e-12
            from proctherm.algebra import expm_herm
            np.testing.assert_allclose(expm_herm(g, -1j), u, atol=1e-10)

    def test_unitary_log_generator_degenerate(self):
        # SWAP has a doubly degenerate eigenvalue pair
        swap = np.eye(4)[[0, 2, 1, 3]].astype(complex)
        g = unitary_log_generator(swap)
        from proctherm.algebra import expm_herm
        np.testing.assert_allclose(expm_herm(g, -1j), swap, atol=1e-10)


# ---------------------------------------------------------------------------
# entropies and Gibbs states
# ---------------------------------------------------------------------------

class TestEntropy:
    def test_pure_state(self):
        reg = two_factor_registry()
        assert von_neumann_entropy(dens(reg, ("S",), np.diag([1.0, 0.0]))) == pytest.approx(0.0, abs=1e-12)

    def test_maximally_mixed(self):
        reg = FactorRegistry([("S", 3)])
        s = von_neumann_entropy(dens(reg, ("S",), np.eye(3) / 3))
        assert s == pytest.approx(math.log(3), abs=1e-12)

    def test_frozen_scalar_value(self):
        # -(0.25 ln 0.25 + 0.75 ln 0.75), evaluated independently
        reg = two_factor_registry()
        s = von_neumann_entropy(dens(reg, ("S",), np.diag([0.25, 0.75])))
        assert s == pytest.approx(0.5623351446188083, abs=1e-14)

    def test_unitary_invariance(self):
        reg = FactorRegistry([("S", 4)])
        rng = np.random.default_rng(41)
        for _ in range(10):
            rho = random_density(rng, 4)
            u = random_unitary(rng, 4)
            s1 = von_neumann_entropy(dens(reg, ("S",), rho))
            s2 = von_neumann_entropy(dens(reg, ("S",), u @ rho @ u.conj().T))
            assert abs(s1 - s2) < 1e-10

    def test_negative_eigenvalue_rejected(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            von_neumann_entropy(DensityOperator(op(reg, ("S",), np.diag([1.5, -0.5])), 1.0))


class TestRelativeEntropy:
    def test_identical_states(self):
        reg = two_factor_registry()
        rng = np.random.default_rng(51)
        rho = dens(reg, ("S",), random_density(rng, 2))
        assert relative_entropy(rho, rho) == pytest.approx(0.0, abs=1e-10)

    def test_analytic_value(self):
        reg = two_factor_registry()
        rho = dens(reg, ("S",), np.diag([1.0, 0.0]))
        sigma = dens(reg, ("S",), np.eye(2) / 2)
        assert relative_entropy(rho, sigma) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_spectral_oracle(self):
        reg = two_factor_registry()
        rng = np.random.default_rng(52)
        for _ in range(10):
            r, s = random_density(rng, 2), random_density(rng, 2)
            wr = np.linalg.eigvalsh(r)
            ws, vs = np.linalg.eigh(s)
            # scalar oracle in the two eigenbases
            expected = float(np.sum(wr * np.log(wr)))
            expected -= float(np.real(np.trace((vs * np.log(ws)) @ vs.conj().T @ r)))
            got = relative_entropy(dens(reg, ("S",), r), dens(reg, ("S",), s))
            assert got == pytest.approx(expected, abs=1e-10)
            assert got >= -1e-10  # Klein inequality

    def test_support_violation_signals_infinity(self):
        reg = two_factor_registry()
        rho = dens(reg, ("S",), np.eye(2) / 2)
        sigma = dens(reg, ("S",), np.diag([1.0, 0.0]))
        assert relative_entropy(rho, sigma) == math.inf

    def test_zero_iff_equal(self):
        reg = FactorRegistry([("S", 3)])
        rng = np.random.default_rng(53)
        for _ in range(10):
            r = random_density(rng, 3)
            s = random_density(rng, 3)
            d = relative_entropy(dens(reg, ("S",), r), dens(reg, ("S",), s))
            if max_norm(r - s) < 1e-9:
                assert d < 1e-9
            else:
                assert d > 0


class TestGibbs:
    def test_degenerate_hamiltonian(self):
        reg = FactorRegistry([("S", 4)])
        rho, z = gibbs_state(op(reg, ("S",), 0.3 * np.eye(4)), beta=2.0)
        np.testing.assert_allclose(rho.mat, np.eye(4) / 4, atol=1e-13)
        assert z == pytest.approx(4 * math.exp(-2.0 * 0.3), rel=1e-12)

    def test_two_level_analytic(self):
        reg = two_factor_registry()
        omega, beta = 1.3, 0.8
        rho, z = gibbs_state(op(reg, ("S",), np.diag([0.0, omega])), beta)
        p = 1.0 / (1.0 + math.exp(-beta * omega))
        np.testing.assert_allclose(rho.mat, np.diag([p, 1 - p]), atol=1e-13)
        assert z == pytest.approx(1 + math.exp(-beta * omega), rel=1e-12)

    def test_matches_spectral_oracle(self):
        reg = FactorRegistry([("S", 4)])
        rng = np.random.default_rng(61)
        h = random_hermitian(rng, 4)
        rho, z = gibbs_state(op(reg, ("S",), h), beta=0.7)
        w, v = np.linalg.eigh(h)
        expected = v @ np.diag(np.exp(-0.7 * w)) @ v.conj().T
        np.testing.assert_allclose(rho.mat, expected / np.trace(expected), atol=1e-12)
        assert z == pytest.approx(float(np.sum(np.exp(-0.7 * w))), rel=1e-10)

    def test_commutes_with_hamiltonian(self):
        reg = FactorRegistry([("S", 5)])
        rng = np.random.default_rng(62)
        h = random_hermitian(rng, 5)
        rho, _ = gibbs_state(op(reg, ("S",), h), beta=1.1)
        assert max_norm(rho.mat @ h - h @ rho.mat) < 1e-11

    def test_nonpositive_beta_rejected(self):
        reg = two_factor_registry()
        with pytest.raises(ValueError):
            gibbs_state(op(reg, ("S",), SX), beta=0.0)


class TestRoundTrips:
    def test_tensor_then_trace_recovers_marginal(self):
        reg = FactorRegistry([("S", 2), ("B", 3)])
        rng = np.random.default_rng(71)
        rho_s, rho_b = random_density(rng, 2), random_density(rng, 3)
        joint = tensor(op(reg, ("S",), rho_s), op(reg, ("B",), rho_b))
        back = partial_trace(DensityOperator(joint, 1.0), ["S"])
        np.testing.assert_allclose(back.mat, rho_s, atol=1e-13)

    def test_embed_expectation_consistency(self):
        reg = FactorRegistry([("S", 2), ("B", 2), ("A0", 3)])
        rng = np.random.default_rng(72)
        h = random_hermitian(rng, 2)
        rho = random_density(rng, 12)
        full = op(reg, ("S",), h).embed(("S", "B", "A0"))
        direct = np.trace(full.mat @ rho)
        marg = ptrace_index(rho, [2, 2, 3], [0])
        assert np.real(direct) == pytest.approx(np.real(np.trace(h @ marg)), abs=1e-12)
