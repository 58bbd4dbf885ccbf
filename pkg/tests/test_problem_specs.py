"""Tests for building solver problems from JSON descriptions."""

import numpy as np
import pytest

from solvers import problem_specs
from solvers.control_opt import make_lq_problem
from solvers.exceptions import ConfigError
from solvers.kernel_calculus import Kernel
from solvers.problem_specs import (
    bsvie_problem,
    control_problem,
    free_term,
    kernel_from,
    kernels_from,
    linear_bsvie_spec,
    linear_svie_spec,
    register_form,
    solver_options,
    svie_problem,
)


class TestFreeTerms:

    def test_constant_and_vector(self, tree):
        ens = tree(3)
        assert np.all(free_term(2.0)(ens) == 2.0)
        values = free_term([1.0, -1.0])(ens)
        assert values.shape == (ens.paths, 4, 2)
        assert np.all(values[..., 1] == -1.0)

    def test_brownian_and_terminal(self, tree):
        ens = tree(3)
        W = ens.W[..., 0]
        brownian = free_term({'kind': 'brownian', 'offset': 1.0, 'scale': 2.0})(ens)
        assert np.allclose(brownian[..., 0], 1.0 + 2.0 * W)
        terminal = free_term({'kind': 'terminal'})(ens)
        assert np.allclose(terminal[..., 0], W[:, -1:] - W)

    def test_decaying_is_frozen_after_cap(self, tree):
        ens = tree(4, horizon=2.0)
        values = free_term({'kind': 'decaying', 'cap': 1.0})(ens)[..., 0]
        W = ens.W[..., 0]
        assert np.allclose(values[:, 4], np.exp(-2.0) * W[:, 2])
        assert np.allclose(values[:, 1], np.exp(-0.5) * W[:, 1])

    def test_exponential(self, tree):
        ens = tree(2)
        values = free_term({'kind': 'exponential', 'rate': 2.0, 'scale': 3.0})(ens)
        assert np.allclose(values[0, :, 0], 3.0 * np.exp(-2.0 * ens.nodes))

    def test_unknown_kind(self, tree):
        with pytest.raises(ConfigError):
            free_term({'kind': 'sawtooth'})(tree(2))


class TestKernels:

    def test_presets(self):
        kernels = kernels_from('sde-unit')
        assert kernels['b_x'] == Kernel.constant(1.0)
        caputo = kernels_from('caputo-unit')
        assert caputo['sigma_x'].scale == pytest.approx(Kernel.caputo(0.75).scale)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            kernels_from('heston')

    def test_bad_kernel(self):
        with pytest.raises(ConfigError):
            kernel_from({'kind': 'fractional', 'alpha': 0.3})
        assert kernel_from(None).is_zero


class TestEquations:

    def test_svie_problem(self, tree):
        p = svie_problem({'A': [[-0.5]], 'mu': 2.0, 'phi': 1.0})
        assert p.mu == 2.0
        assert p.free_term(tree(2)).shape == (4, 3, 1)

    def test_svie_shape_mismatch(self):
        with pytest.raises(ConfigError):
            svie_problem({'n': 2, 'A': [1.0, 2.0, 3.0]})

    def test_bsvie_problem(self):
        p = bsvie_problem({'psi': {'kind': 'terminal'}, 'driver': {'c_y': 0.5}, 'lambda': 2.0,
                           'horizon': 1.0, 'diagonal': False})
        assert p.lam == 2.0
        assert p.horizon == 1.0
        assert not p.diagonal
        assert p.driver.g_y == Kernel.constant(0.5)

    def test_solver_options(self):
        opts = solver_options({'mode': 'picard', 'tol': 1e-9}, threads=2)
        assert (opts.mode, opts.tol, opts.threads) == ('picard', 1e-9, 2)
        with pytest.raises(ConfigError):
            solver_options({'mode': 'newton'})

    def test_linear_specs_default_envelopes(self):
        spec = linear_bsvie_spec({'A': 0.5, 'B': 0.3, 'lambda': 2.0})
        assert spec.K_A == Kernel.constant(0.5)
        assert spec.K_B.scale == pytest.approx(0.3)
        fwd = linear_svie_spec({'C': 0.0})
        assert fwd.K_C.is_zero
        assert fwd.D is None


class TestControlForms:

    def test_lq_form(self):
        p = control_problem({'form': 'lq', 'A': -0.2, 'B': 0.5, 'C': 0.2, 'D': 0.1})
        assert p.meta['form'] == 'lq'
        assert p.domain().admissible

    def test_missing_control_matrix(self):
        with pytest.raises(ConfigError):
            control_problem({'form': 'lq', 'A': -0.2})

    def test_unknown_form(self):
        with pytest.raises(ConfigError):
            control_problem({'form': 'hjb'})

    def test_box_projection(self):
        p = control_problem({'form': 'lq', 'B': 0.5, 'box': [-1.0, 1.0]})
        assert np.array_equal(p.projection(np.array([-3.0, 0.5, 2.0])), [-1.0, 0.5, 1.0])

    def test_register_form(self, monkeypatch):
        monkeypatch.setattr(problem_specs, 'CONTROL_FORMS', dict(problem_specs.CONTROL_FORMS))

        @register_form('scalar-lq')
        def build(data):
            return make_lq_problem(0.0, data['gain'], 1.0, 1.0)

        p = control_problem({'form': 'scalar-lq', 'gain': 2.0})
        assert p.kernels['b_u'] == Kernel.constant(2.0)

    def test_sde_and_caputo_forms(self):
        sde = control_problem({'form': 'sde', 'b_x': -0.3, 'sigma_x': 0.2, 'mu': 1.0, 'lambda': 2.0})
        assert sde.meta['form'] == 'sde'
        caputo = control_problem({'form': 'caputo', 'alpha': 0.8, 'b_x': 0.5, 'lambda': 4.0})
        assert caputo.meta['alpha'] == 0.8
        assert caputo.mu == 2.0

    def test_integro_form_offsets(self):
        p = control_problem({'form': 'integro', 'A1': {'scale': 0.5}, 'A2': {'scale': 1.0, 'rate': 2.0}})
        assert p.n == 3
        assert p.meta['offsets'] == [0, 1, 2, 3, 3, 3]
