"""Shared fixtures: small exact trees and seeded Monte Carlo bundles."""

import numpy as np
import pytest

from solvers.stochastic_core import EnsembleSpec, TimeGrid, build_ensemble


@pytest.fixture
def tree():
    """Factory for binary-tree ensembles on [0, T] with N steps."""
    def make(steps: int = 8, horizon: float = 1.0):
        return build_ensemble(TimeGrid(horizon, steps), EnsembleSpec('tree'))
    return make


@pytest.fixture
def mc():
    def make(paths: int = 256, steps: int = 4, horizon: float = 1.0, seed: int = 7):
        return build_ensemble(TimeGrid(horizon, steps), EnsembleSpec('montecarlo', paths=paths, seed=seed))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
