"""Tests for grids, ensembles, conditional expectations and weighted norms."""

import math

import numpy as np
import pytest

from solvers.exceptions import ConfigError, MemoryBudgetError
from solvers.stochastic_core import (
    AdaptedProcess,
    EnsembleSpec,
    TimeGrid,
    TwoParameterProcess,
    build_ensemble,
    cond_expect,
    is_adapted,
    martingale_represent,
    parallel_rows,
    random_adapted,
    weighted_sq_norm,
    weighted_sq_norm_two,
)

EXACT = 1e-12


# ═══════════════════════════════════════════════════════════════════
# GRIDS AND ENSEMBLES
# ═══════════════════════════════════════════════════════════════════


class TestTimeGrid:

    def test_nodes_and_step(self):
        grid = TimeGrid(1.0, 8)
        assert grid.h == 0.125
        assert len(grid.nodes) == 9
        assert grid.index(0.5) == 4

    def test_off_grid_time(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 8).index(0.3)

    def test_parse(self):
        assert TimeGrid.parse('2,4') == TimeGrid(2.0, 4)
        with pytest.raises(ConfigError):
            TimeGrid.parse('2')
        with pytest.raises(ConfigError):
            TimeGrid.parse('-1,4')

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 4)
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)


class TestEnsembleSpec:

    def test_parse_forms(self):
        assert EnsembleSpec.parse('tree').model == 'tree'
        spec = EnsembleSpec.parse('mc:100', seed=7)
        assert (spec.model, spec.paths, spec.seed) == ('montecarlo', 100, 7)

    def test_parse_rejects_unknown(self):
        with pytest.raises(ConfigError):
            EnsembleSpec.parse('sobol')
        with pytest.raises(ConfigError):
            EnsembleSpec.parse('mc:many')


class TestBuildEnsemble:

    def test_tree_enumerates_signs(self, tree):
        ens = tree(3)
        assert ens.paths == 8
        assert np.allclose(np.abs(ens.dW), math.sqrt(1.0 / 3.0))
        # each step splits evenly
        assert np.allclose(ens.dW.sum(axis=0), 0.0)

    def test_ensemble_is_read_only(self, tree):
        ens = tree(2)
        with pytest.raises(ValueError):
            ens.dW[0, 0, 0] = 1.0

    def test_tree_limits(self):
        with pytest.raises(ConfigError):
            build_ensemble(TimeGrid(1.0, 25), EnsembleSpec('tree'))
        with pytest.raises(ConfigError):
            build_ensemble(TimeGrid(1.0, 4), EnsembleSpec('tree', dim=2))

    def test_memory_budget(self):
        with pytest.raises(MemoryBudgetError):
            build_ensemble(TimeGrid(1.0, 10), EnsembleSpec('montecarlo', paths=100000), memory_budget_gb=1e-6)

    def test_montecarlo_is_deterministic_across_threads(self):
        grid, spec = TimeGrid(1.0, 5), EnsembleSpec('montecarlo', paths=64, seed=11)
        one = build_ensemble(grid, spec, threads=1)
        four = build_ensemble(grid, spec, threads=4)
        assert np.array_equal(one.dW, four.dW)

    def test_seed_changes_paths(self):
        grid = TimeGrid(1.0, 3)
        a = build_ensemble(grid, EnsembleSpec('montecarlo', paths=16, seed=1))
        b = build_ensemble(grid, EnsembleSpec('montecarlo', paths=16, seed=2))
        assert not np.array_equal(a.dW, b.dW)

    def test_montecarlo_first_increment_is_centered(self):
        paths = 20000
        ens = build_ensemble(TimeGrid(1.0, 1), EnsembleSpec('montecarlo', paths=paths, seed=7))
        assert abs(ens.dW[:, 0, 0].mean()) <= 4.0 / math.sqrt(paths)

    def test_parallel_rows_keeps_order(self):
        assert parallel_rows(lambda x: x * x, range(10), threads=4) == [x * x for x in range(10)]


# ═══════════════════════════════════════════════════════════════════
# CONDITIONAL EXPECTATION AND REPRESENTATION
# ═══════════════════════════════════════════════════════════════════


class TestCondExpect:

    def test_brownian_martingale(self, tree):
        ens = tree(6)
        payoff = ens.W[:, -1, 0]
        for i in range(ens.steps + 1):
            assert np.allclose(cond_expect(ens, payoff, i), ens.W[:, i, 0], atol=EXACT)

    def test_square_of_terminal_value(self, tree):
        ens = tree(5)
        payoff = ens.W[:, -1, 0] ** 2
        for i in range(ens.steps + 1):
            expected = ens.W[:, i, 0] ** 2 + (1.0 - ens.nodes[i])
            assert np.allclose(cond_expect(ens, payoff, i), expected, atol=EXACT)

    def test_trailing_dimensions_are_kept(self, tree):
        ens = tree(4)
        payoff = np.stack([ens.W[:, -1, 0], 2.0 * ens.W[:, -1, 0]], axis=1)
        out = cond_expect(ens, payoff, 2)
        assert out.shape == payoff.shape
        assert np.allclose(out[:, 1], 2.0 * ens.W[:, 2, 0])

    def test_regression_recovers_quadratic_on_montecarlo(self, mc):
        ens = mc(paths=2000, steps=4)
        payoff = ens.W[:, 2, 0] ** 2 + 3.0
        assert np.allclose(cond_expect(ens, payoff, 2), payoff, atol=1e-8)

    def test_registered_state_is_reproduced(self, mc):
        ens = mc(paths=512, steps=6)
        X = ens.h * np.cumsum(ens.W, axis=1)
        target = X[:, 5, 0]
        with_state = cond_expect(ens.with_state(X), target, 5)
        w_only = cond_expect(ens, target, 5)
        assert np.linalg.norm(with_state - target) <= 1e-8 * np.linalg.norm(target)
        assert np.linalg.norm(w_only - target) > 0.1 * np.linalg.norm(target)

    def test_registering_a_state_returns_a_view(self, mc):
        ens = mc(paths=64, steps=3)
        view = ens.with_state(np.ones((64, 4, 1)))
        assert ens.state is None
        assert view.W is ens.W
        assert view.state.shape == (64, 4, 1)

    def test_constant_state_adds_nothing(self, mc):
        ens = mc(paths=256, steps=4)
        payoff = ens.W[:, -1, 0] ** 3
        flat = np.full((256, 5, 1), 2.5)
        assert np.allclose(cond_expect(ens.with_state(flat), payoff, 3), cond_expect(ens, payoff, 3), atol=1e-10)


class TestMartingaleRepresent:

    def test_square_minus_time(self, tree):
        ens = tree(4)
        payoff = ens.W[:, 2, 0] ** 2 - ens.nodes[2]
        Z, residual = martingale_represent(ens, payoff)
        assert np.allclose(Z[:, 0, 0], 0.0, atol=EXACT)
        assert np.allclose(Z[:, 1, 0], 2.0 * ens.W[:, 1, 0], atol=EXACT)
        assert np.allclose(Z[:, 2:], 0.0, atol=EXACT)
        assert np.max(np.abs(residual)) <= EXACT

    def test_random_payoff_is_represented_exactly(self, tree, rng):
        ens = tree(5)
        payoff = rng.standard_normal(ens.paths)
        _, residual = martingale_represent(ens, payoff)
        assert np.max(np.abs(residual)) <= 1e-10


# ═══════════════════════════════════════════════════════════════════
# NORMS AND PROCESSES
# ═══════════════════════════════════════════════════════════════════


class TestWeightedNorms:

    def test_constant_one(self, tree):
        ens = tree(4)
        sq, root = weighted_sq_norm(ens, np.ones((ens.paths, 5, 1)), 0.0)
        assert sq == pytest.approx(1.0)
        assert root == pytest.approx(1.0)

    def test_weight_is_left_rectangle(self, tree):
        ens = tree(4)
        sq, _ = weighted_sq_norm(ens, np.ones((ens.paths, 5, 1)), -0.5)
        assert sq == pytest.approx(sum(math.exp(-t) for t in ens.nodes[:4]) * 0.25)

    def test_two_parameter(self, tree):
        ens = tree(4)
        sq, _ = weighted_sq_norm_two(ens, np.ones((ens.paths, 5, 4, 1, 1)), 0.0)
        assert sq == pytest.approx(1.0)


class TestProcesses:

    def test_brownian_is_adapted(self, tree):
        ens = tree(5)
        assert is_adapted(ens, ens.W)

    def test_terminal_value_is_not_adapted(self, tree):
        ens = tree(5)
        terminal = np.repeat(ens.W[:, -1:, :], ens.steps + 1, axis=1)
        assert not is_adapted(ens, terminal)

    def test_random_adapted(self, tree, rng):
        ens = tree(5)
        values = random_adapted(ens, (2,), rng)
        assert values.shape == (ens.paths, 6, 2)
        assert is_adapted(ens, values)

    def test_frame_layout(self, tree):
        ens = tree(3)
        frame = AdaptedProcess(ens.W, ens.grid, name='W').to_frame()
        assert list(frame.columns) == ['path', 't', 'W']
        assert len(frame) == ens.paths * 4
        assert frame['t'].iloc[:4].tolist() == pytest.approx(list(ens.nodes))

    def test_two_parameter_adaptedness(self, tree):
        ens = tree(3)
        Z = np.zeros((ens.paths, 4, 3))
        for j in range(3):
            Z[:, :, j] = ens.W[:, j, 0][:, None]
        assert TwoParameterProcess(Z, ens.grid).is_adapted_in_s(ens)
        Z[:, :, 0] = ens.W[:, 3, 0][:, None]
        assert not TwoParameterProcess(Z, ens.grid).is_adapted_in_s(ens)
