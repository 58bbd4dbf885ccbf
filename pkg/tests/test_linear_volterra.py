"""Tests for the fundamental solution, resolvent, duality and BSDE reduction."""

import math

import numpy as np
import pytest

from solvers.bsvie_solver import SolverOptions, solve_bsvie, solve_trivial
from solvers.exceptions import InadmissibleError
from solvers.kernel_calculus import Kernel
from solvers.linear_volterra import (
    LinearBsvieSpec,
    LinearSvieSpec,
    bsvie_to_bsde,
    duality_check,
    equation_z,
    fundamental_phi,
    phi_moment_bound,
    resolvent,
    resolvent_identity_residual,
    variation_of_constants,
)
from solvers.stochastic_core import cond_expect, weighted_sq_norm

EXACT = 1e-12


def terminal_brownian(ens):
    return np.repeat(ens.W[:, -1:, :], ens.steps + 1, axis=1)


def scalar_spec(a=0.0, b=None, lam=1.0):
    return LinearBsvieSpec(
        1,
        [[a]],
        B=None if b is None else [[[b]]],
        K_A=Kernel.constant(abs(a)) if a else Kernel.zero(),
        K_B=Kernel.constant(abs(b)) if b else Kernel.zero(),
        lam=lam,
    )


# ═══════════════════════════════════════════════════════════════════
# FUNDAMENTAL SOLUTION AND RESOLVENT
# ═══════════════════════════════════════════════════════════════════


class TestFundamentalSolution:

    def test_identity_on_the_diagonal(self, tree):
        ens = tree(4)
        Phi = fundamental_phi(scalar_spec(b=0.5), ens).values
        for i in range(5):
            assert np.allclose(Phi[:, i, i], 1.0)

    def test_mean_one_and_moment_bound(self, tree):
        ens = tree(8)
        spec = scalar_spec(b=0.5)
        Phi = fundamental_phi(spec, ens)
        means = ens.expect(Phi.values[..., 0, 0])
        upper = np.triu_indices(9)
        assert np.allclose(means[upper], 1.0, atol=EXACT)
        moment, bound = phi_moment_bound(spec, Phi, ens)
        assert bound == pytest.approx(1.0 / (1.0 - 0.5 / math.sqrt(2.0)))
        assert 1.0 <= moment <= bound

    def test_deterministic_without_noise(self, tree):
        ens = tree(3)
        Phi = fundamental_phi(scalar_spec(a=0.5), ens).values
        assert np.allclose(Phi[:, np.triu_indices(4)[0], np.triu_indices(4)[1]], 1.0)

    def test_rows_are_discrete_martingales(self, tree):
        ens = tree(6)
        Phi = fundamental_phi(scalar_spec(a=0.5, b=0.3), ens).values
        for i in range(ens.steps):
            for j in range(i, ens.steps):
                assert np.allclose(cond_expect(ens, Phi[:, i, j + 1], j), Phi[:, i, j], atol=EXACT)


class TestResolvent:

    def test_deterministic_closed_form(self, tree):
        ens = tree(8)
        a = 0.5
        spec = scalar_spec(a=a)
        res = resolvent(spec, fundamental_phi(spec, ens), ens)
        R = res.R.values[0, :, :, 0, 0]
        for i in range(9):
            for j in range(i, 9):
                assert R[i, j] == pytest.approx(a * (1.0 + a * ens.h) ** (j - i), rel=1e-8)
            assert np.all(R[i, :i] == 0.0)

    def test_identity_residual(self, tree):
        ens = tree(6)
        spec = scalar_spec(a=0.5, b=0.3)
        res = resolvent(spec, fundamental_phi(spec, ens), ens)
        assert resolvent_identity_residual(res, ens, spec.lam, spec.eta) <= 1e-9

    def test_term_ratios_stay_below_theory(self, tree):
        ens = tree(8)
        spec = scalar_spec(a=0.5)
        res = resolvent(spec, fundamental_phi(spec, ens), ens)
        assert res.measured_ratios
        assert max(res.measured_ratios) <= 1.1 * spec.series_ratio()

    def test_series_ratio_guard(self, tree):
        ens = tree(3)
        spec = scalar_spec(a=2.0)
        with pytest.raises(InadmissibleError) as info:
            resolvent(spec, fundamental_phi(spec, ens), ens)
        assert info.value.clause == 'series_ratio'


# ═══════════════════════════════════════════════════════════════════
# VARIATION OF CONSTANTS
# ═══════════════════════════════════════════════════════════════════


class TestVariationOfConstants:

    def test_deterministic_closed_form(self, tree):
        ens = tree(8)
        a, lam = 0.5, 1.0
        result = variation_of_constants(scalar_spec(a=a, lam=lam), 1.0, ens, compare=False)
        tau = 1.0 - ens.nodes
        expected = 1.0 + a * (np.exp((a - lam) * tau) - 1.0) / (a - lam)
        assert np.allclose(result.Y.values[0, :, 0], expected, atol=3.0 * ens.h)
        assert math.isnan(result.gap)

    def test_noise_only_coefficient_is_exact(self, tree):
        ens = tree(6)
        b, lam = 0.5, 1.0
        result = variation_of_constants(scalar_spec(b=b, lam=lam), terminal_brownian, ens,
                                        opts=SolverOptions(tol=1e-10))
        nodes, h = ens.nodes, ens.h
        shift = np.array([sum(math.exp(-lam * (nodes[j] - nodes[i])) * h for j in range(i, 6)) for i in range(7)])
        assert np.allclose(result.Y.values[..., 0], ens.W[..., 0] + b * shift[None, :], atol=1e-10)
        assert result.gap <= 1e-6
        assert result.Z.derived
        assert result.to_dict()['z_derived'] is True
        assert result.z_gap <= 1e-6

    def test_equation_z_reproduces_fixed_point(self, tree):
        ens = tree(6)
        problem = scalar_spec(a=0.5, b=0.3).problem(terminal_brownian)
        sol = solve_bsvie(problem, ens, SolverOptions(tol=1e-11))
        Z = equation_z(problem, sol.Y, ens)
        assert np.max(np.abs(Z - sol.Z)) <= 1e-7

    def test_linear_in_free_term(self, tree, rng):
        ens = tree(5)
        spec = scalar_spec(a=0.5, b=0.3)
        first = terminal_brownian(ens)
        second = rng.standard_normal((ens.paths, 6, 1))
        one = variation_of_constants(spec, first, ens, compare=False)
        two = variation_of_constants(spec, second, ens, compare=False)
        both = variation_of_constants(spec, first + 2.0 * second, ens, compare=False)
        assert np.allclose(both.Y.values, one.Y.values + 2.0 * two.Y.values, atol=1e-10)
        assert np.allclose(both.Z.values, one.Z.values + 2.0 * two.Z.values, atol=1e-9)

    def test_gap_to_fixed_point_shrinks_with_step(self, tree):
        spec = scalar_spec(a=0.5, b=0.3)
        for steps in (4, 6, 8):
            ens = tree(steps)
            result = variation_of_constants(spec, terminal_brownian, ens)
            size = weighted_sq_norm(ens, terminal_brownian(ens), spec.eta)[1]
            assert result.gap <= 5.0 * math.sqrt(ens.h) * size, steps


# ═══════════════════════════════════════════════════════════════════
# DUALITY
# ═══════════════════════════════════════════════════════════════════


class TestDuality:

    @pytest.mark.parametrize('phi', [1.0, lambda ens: ens.W])
    def test_exact_without_coefficients(self, tree, rng, phi):
        ens = tree(5)
        fwd = LinearSvieSpec(1, [[0.0]])
        psi = rng.standard_normal((ens.paths, 6, 1))
        report = duality_check(fwd, phi, psi, mu=1.0, eta=0.0, lam=1.0, ens=ens)
        assert report.gap <= 1e-12 * max(1.0, abs(report.lhs))

    def test_strict_adjoint_matches(self, tree, rng):
        ens = tree(6)
        fwd = LinearSvieSpec(1, [[0.5]], D=[[[0.3]]], K_C=Kernel.constant(0.5), K_D=Kernel.constant(0.3))
        psi = rng.standard_normal((ens.paths, 7, 1))
        report = duality_check(fwd, 1.0, psi, mu=1.0, eta=0.0, lam=1.0, ens=ens, diagonal=False,
                               opts=SolverOptions(tol=1e-11))
        assert report.gap <= 1e-6
        assert report.to_dict()['lhs'] == report.lhs

    def test_both_sides_are_linear(self, tree, rng):
        ens = tree(5)
        fwd = LinearSvieSpec(1, [[0.5]], D=[[[0.3]]], K_C=Kernel.constant(0.5), K_D=Kernel.constant(0.3))
        opts = SolverOptions(tol=1e-11)
        psi = rng.standard_normal((ens.paths, 6, 1))
        other = rng.standard_normal((ens.paths, 6, 1))

        def check(phi, psi_):
            return duality_check(fwd, phi, psi_, mu=1.0, eta=0.0, lam=1.0, ens=ens, opts=opts)

        base = check(1.0, psi)
        shifted_phi = check(lambda e: e.W, psi)
        summed_phi = check(lambda e: 1.0 + e.W, psi)
        assert np.allclose(summed_phi.forward.values, base.forward.values + shifted_phi.forward.values, atol=1e-12)
        assert summed_phi.lhs == pytest.approx(base.lhs + shifted_phi.lhs, abs=1e-10)
        assert summed_phi.rhs == pytest.approx(base.rhs + shifted_phi.rhs, abs=1e-10)

        shifted_psi = check(1.0, other)
        summed_psi = check(1.0, psi + other)
        assert np.allclose(summed_psi.backward.Y, base.backward.Y + shifted_psi.backward.Y, atol=1e-8)
        assert summed_psi.lhs == pytest.approx(base.lhs + shifted_psi.lhs, abs=1e-10)
        assert summed_psi.rhs == pytest.approx(base.rhs + shifted_psi.rhs, abs=1e-8)

    def test_diagonal_cell_gap_is_first_order(self, mc):
        # deterministic coefficients and data, so a handful of paths carries no sampling error
        fwd = LinearSvieSpec(1, [[0.5]], K_C=Kernel.constant(0.5))
        gaps = []
        for steps in (8, 16, 32):
            ens = mc(paths=16, steps=steps)
            report = duality_check(fwd, 1.0, 1.0, mu=1.0, eta=0.0, lam=1.0, ens=ens, diagonal=True,
                                   opts=SolverOptions(tol=1e-13))
            gaps.append(report.gap)
        assert gaps == sorted(gaps, reverse=True)
        assert math.log2(gaps[1] / gaps[2]) >= 0.8, gaps

    def test_weight_below_root(self, tree):
        ens = tree(3)
        fwd = LinearSvieSpec(1, [[0.5]], D=[[[0.3]]], K_C=Kernel.constant(0.5), K_D=Kernel.constant(0.3))
        with pytest.raises(InadmissibleError) as info:
            duality_check(fwd, 1.0, 1.0, mu=0.5, eta=0.0, lam=1.0, ens=ens)
        assert info.value.clause == 'duality_hypothesis'


# ═══════════════════════════════════════════════════════════════════
# REDUCTION TO A BSDE
# ═══════════════════════════════════════════════════════════════════


class TestBsdeReduction:

    def test_constant_solution(self, tree):
        ens = tree(8)
        lam = 2.0
        sol = solve_trivial(np.ones((ens.paths, 9, 1)), ens)
        reduction = bsvie_to_bsde(sol, lam, 1.0, ens)
        expected = (1.0 - np.exp(-lam * (1.0 - ens.nodes))) / lam
        assert np.allclose(reduction.cY.values[0, :, 0], expected, atol=ens.h)
        assert np.allclose(reduction.cZ.values, 0.0)

    def test_hypothesis_guard(self, tree):
        ens = tree(3)
        sol = solve_trivial(np.ones((ens.paths, 4, 1)), ens)
        with pytest.raises(InadmissibleError) as info:
            bsvie_to_bsde(sol, 1.0, 1.0, ens)
        assert info.value.clause == 'bsde_hypothesis'

    def test_residual_shrinks_with_the_step(self, tree):
        norms = []
        for steps in (4, 8):
            ens = tree(steps)
            sol = solve_trivial(terminal_brownian(ens), ens)
            norms.append(bsvie_to_bsde(sol, 2.0, 1.0, ens).residual_norm)
        assert norms[1] > 0
        assert norms[0] / norms[1] >= 1.74
