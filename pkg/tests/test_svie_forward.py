"""Tests for the forward SVIE time stepper and its estimates."""

import math

import numpy as np
import pytest
from scipy import special

from solvers.exceptions import InadmissibleError
from solvers.kernel_calculus import Kernel
from solvers.svie_forward import (
    Coefficient,
    SvieProblem,
    apriori_bound,
    linear_drift,
    linear_problem,
    lipschitz_spot_check,
    solve_svie,
    stability_gap,
    volterra_terms,
)


class TestDeterministicOracles:

    def test_caputo_unit_drift_is_exact(self, tree):
        ens = tree(6)
        alpha = 0.75
        drift = linear_drift(np.zeros((1, 1)), offset=[1.0], factor=Kernel.caputo(alpha))
        X = solve_svie(SvieProblem(1, 1.0, drift, mu=1.0), ens).values
        expected = 1.0 + ens.nodes ** alpha / special.gamma(alpha + 1.0)
        assert np.allclose(X[0, :, 0], expected, rtol=1e-12)

    def test_linear_drift_is_explicit_euler(self, tree):
        ens = tree(8)
        X = solve_svie(linear_problem(1, [[-0.5]], phi=1.0, mu=1.0), ens).values
        expected = (1.0 - 0.5 * ens.h) ** np.arange(ens.steps + 1)
        assert np.allclose(X[:, :, 0], expected[None, :], rtol=1e-12)


class TestStochasticScheme:

    def test_matches_hand_rolled_recursion(self, tree):
        ens = tree(6)
        sigma = 0.3
        X = solve_svie(linear_problem(1, [[0.0]], D=[[[sigma]]], phi=1.0, mu=1.0), ens).values[..., 0]
        expected = np.ones((ens.paths, ens.steps + 1))
        for i in range(1, ens.steps + 1):
            expected[:, i] = 1.0 + sigma * np.sum(expected[:, :i] * ens.dW[:, :i, 0], axis=1)
        assert np.allclose(X, expected, rtol=1e-12)

    def test_solution_is_adapted(self, tree):
        ens = tree(6)
        X = solve_svie(linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0), ens)
        assert X.is_adapted(ens)

    def test_two_dimensional_state(self, tree):
        ens = tree(5)
        A = [[0.0, 1.0], [-1.0, 0.0]]
        X = solve_svie(linear_problem(2, A, phi=[1.0, 0.0], mu=2.0), ens).values
        assert X.shape == (ens.paths, 6, 2)
        # explicit Euler on a rotation grows the radius by sqrt(1 + h^2) per step
        radius = np.linalg.norm(X[0], axis=1)
        assert radius == pytest.approx(np.sqrt(1.0 + ens.h ** 2) ** np.arange(6), rel=1e-12)

    def test_runs_on_montecarlo(self, mc):
        ens = mc(paths=128, steps=4)
        X = solve_svie(linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0), ens).values
        assert np.all(np.isfinite(X))

    def test_volterra_terms_reproduce_the_solution(self, tree):
        ens = tree(5)
        p = linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0)
        X = solve_svie(p, ens).values
        assert np.allclose(X - p.free_term(ens), volterra_terms(p, ens, X), atol=1e-14)


class TestAdmissibility:

    def test_weight_below_root_is_refused(self, tree):
        ens = tree(4)
        with pytest.raises(InadmissibleError) as info:
            solve_svie(linear_problem(1, [[1.0]], D=[[[1.0]]], phi=1.0, mu=1.0), ens)
        assert info.value.clause == 'weight'
        assert info.value.margin < 0

    def test_spot_check_counts_violations(self, tree):
        ens = tree(4)
        honest = linear_problem(1, [[2.0]], phi=1.0, mu=4.0)
        assert lipschitz_spot_check(honest, ens) == 0
        lying = SvieProblem(1, 1.0, linear_drift(np.array([[2.0]]), envelope=Kernel.constant(0.5)), mu=4.0)
        assert lipschitz_spot_check(lying, ens) > 0

    def test_factored_envelope_spot_check(self, tree):
        ens = tree(4)
        p = linear_problem(1, [[0.5]], phi=1.0, mu=2.0, factor=Kernel.caputo(0.75))
        assert p.drift.factored
        assert lipschitz_spot_check(p, ens) == 0


class TestEstimates:

    def test_apriori_bound(self, tree):
        ens = tree(8)
        p = linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0)
        X = solve_svie(p, ens).values
        report = apriori_bound(p, X, ens)
        assert report.ok
        assert report.constant == pytest.approx(1.0 / (1.0 - 0.25 - 0.15))

    def test_stability_against_shifted_free_term(self, tree):
        ens = tree(8)
        p = linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0)
        q = linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.1, mu=2.0)
        report = stability_gap(p, q, ens)
        assert report.ok
        assert report.lhs > 0

    def test_custom_coefficient_needs_no_derivatives(self, tree):
        ens = tree(4)
        drift = Coefficient(lambda t, s, x, u: -np.sin(x), Kernel.constant(1.0), name='sine')
        X = solve_svie(SvieProblem(1, 0.5, drift, mu=2.0), ens).values
        assert X[0, 1, 0] == pytest.approx(0.5 - math.sin(0.5) * ens.h)


# ═══════════════════════════════════════════════════════════════════
# REFINEMENT
# ═══════════════════════════════════════════════════════════════════


def mittag_leffler(alpha, z, terms=80):
    k = np.arange(terms)
    return np.sum(np.power.outer(z, k) / special.gamma(alpha * k + 1.0), axis=-1)


class TestRefinement:

    LADDER = (8, 16, 32, 64)

    def test_caputo_linear_drift_converges(self, mc):
        # X = 1 + int (t-s)^{alpha-1}/Gamma(alpha) X ds is solved by E_alpha(t^alpha)
        alpha = 0.75
        errors = []
        for steps in self.LADDER:
            ens = mc(paths=8, steps=steps)
            X = solve_svie(linear_problem(1, [[1.0]], phi=1.0, mu=2.0, factor=Kernel.caputo(alpha)), ens).values
            exact = mittag_leffler(alpha, ens.nodes ** alpha)
            errors.append(np.max(np.abs(X[0, :, 0] - exact)))
        rate = 2.0 ** min(alpha, 0.5)
        for coarse, fine in zip(errors, errors[1:]):
            assert coarse / fine >= 0.9 * rate, errors

    def test_geometric_noise_converges_at_half_order(self, mc):
        # X = 1 + int sigma X dW is exp(sigma W - sigma^2 t / 2)
        sigma = 0.5
        errors = []
        for steps in self.LADDER:
            ens = mc(paths=4000, steps=steps)
            X = solve_svie(linear_problem(1, [[0.0]], D=[[[sigma]]], phi=1.0, mu=1.0), ens).values
            exact = np.exp(sigma * ens.W[:, -1, 0] - 0.5 * sigma ** 2)
            errors.append(math.sqrt(np.mean((X[:, -1, 0] - exact) ** 2)))
        assert errors == sorted(errors, reverse=True)
        order = math.log2(errors[0] / errors[-1]) / (len(errors) - 1)
        assert order >= 0.4, errors

    def test_apriori_slack_shrinks_with_step(self, tree):
        excesses, tols = [], []
        for steps in (4, 6, 8, 10):
            ens = tree(steps)
            p = linear_problem(1, [[-0.5]], D=[[[0.3]]], phi=1.0, mu=2.0)
            report = apriori_bound(p, solve_svie(p, ens).values, ens)
            assert report.tol == pytest.approx(5.0 * ens.h ** 0.5)
            excesses.append(max(report.lhs / report.rhs - 1.0, 0.0))
            tols.append(report.tol)
        assert tols == sorted(tols, reverse=True)
        assert all(excess <= tol for excess, tol in zip(excesses, tols))
