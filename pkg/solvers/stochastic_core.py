"""
Stochastic Core - Discrete Filtrations and Conditional Expectations
Time grids, Brownian path ensembles, conditional expectation engines, weighted norms and discrete martingale representation.
"""

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import PolynomialFeatures

from solvers.exceptions import ConfigError, MemoryBudgetError
from solvers.solver_config import (
    DEFAULT_MEMORY_BUDGET_GB,
    ERROR_MESSAGES,
    LSMC,
    MAX_TREE_DIMENSION,
    MAX_TREE_STEPS,
)

logger = logging.getLogger(__name__)

GIB = float(1 << 30)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i h on [0, T]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"Horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"Step count must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.h

    def index(self, t: float) -> int:
        """Grid index of a node time."""
        i = int(round(t / self.h))
        if not 0 <= i <= self.steps or abs(i * self.h - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"Time {t} is not a node of {self}")
        return i

    @classmethod
    def parse(cls, text: str) -> 'TimeGrid':
        """Parse 'T,N'."""
        try:
            horizon, steps = text.split(',')
            return cls(float(horizon), int(steps))
        except ValueError as e:
            raise ConfigError(f"Grid must be given as T,N: {text!r} ({e})")

    def to_dict(self) -> Dict:
        return {'T': self.horizon, 'N': self.steps}


@dataclass(frozen=True)
class EnsembleSpec:
    """Exact binary tree or seeded Monte Carlo bundle."""

    model: str = 'tree'
    paths: int = 0
    seed: int = 0
    dim: int = 1

    def __post_init__(self):
        if self.model not in ('tree', 'montecarlo'):
            raise ConfigError(f"Unknown ensemble model '{self.model}'")
        if self.model == 'montecarlo' and self.paths < 1:
            raise ConfigError(f"Monte Carlo ensembles need a positive path count, got {self.paths}")
        if self.dim < 1:
            raise ConfigError(f"Brownian dimension must be positive, got {self.dim}")

    @classmethod
    def parse(cls, text: str, seed: int = 0, dim: int = 1) -> 'EnsembleSpec':
        """Parse 'tree' or 'mc:M'."""
        text = text.strip().lower()
        if text == 'tree':
            return cls('tree', dim=dim)
        if text.startswith('mc:'):
            try:
                return cls('montecarlo', paths=int(text[3:]), seed=seed, dim=dim)
            except ValueError as e:
                raise ConfigError(f"Bad Monte Carlo path count in {text!r}: {e}")
        raise ConfigError(f"Ensemble must be 'tree' or 'mc:M', got {text!r}")

    def to_dict(self) -> Dict:
        return {'model': self.model, 'paths': self.paths, 'seed': self.seed, 'dim': self.dim}


def ensure_budget(nbytes: float, budget_gb: float = DEFAULT_MEMORY_BUDGET_GB):
    if nbytes > budget_gb * GIB:
        raise MemoryBudgetError(ERROR_MESSAGES['memory'].format(need=nbytes / GIB, budget=budget_gb))


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class FilteredEnsemble:
    """Time grid plus Brownian increments, read-only after construction."""

    def __init__(self, grid: TimeGrid, spec: EnsembleSpec, increments: np.ndarray,
                 memory_budget_gb: float = DEFAULT_MEMORY_BUDGET_GB):
        self.grid = grid
        self.spec = spec
        self.memory_budget_gb = memory_budget_gb
        self.dW = _freeze(np.ascontiguousarray(increments, dtype=float))
        paths = self.dW.shape[0]
        W = np.zeros((paths, grid.steps + 1, spec.dim))
        np.cumsum(self.dW, axis=1, out=W[:, 1:, :])
        self.W = _freeze(W)
        self.weights = _freeze(np.full(paths, 1.0 / paths))
        self.state: Optional[np.ndarray] = None
        self._designs: Dict[int, Tuple[np.ndarray, int]] = {}

    @property
    def paths(self) -> int:
        return self.dW.shape[0]

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def is_tree(self) -> bool:
        return self.spec.model == 'tree'

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Expectation over paths (axis 0)."""
        return np.tensordot(self.weights, values, axes=(0, 0))

    def check_memory(self, shape: Tuple[int, ...], itemsize: int = 8):
        ensure_budget(float(np.prod(shape)) * itemsize, self.memory_budget_gb)

    def with_state(self, state: Optional[np.ndarray]) -> 'FilteredEnsemble':
        """Same paths and grid with `state` (P, N+1, ...) registered in the regression basis."""
        view = copy.copy(self)
        view.state = None
        if state is not None:
            state = np.asarray(state, dtype=float)
            view.state = _freeze(state.reshape(self.paths, state.shape[1], -1).copy())
        view._designs = {}
        return view

    def basis(self, i: int, features: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
        """Degree-2 polynomials in W(t_i), the registered state at t_i and caller features."""
        columns = [self.W[:, i, :]]
        if self.state is not None and i < self.state.shape[1]:
            x = self.state[:, i]
            # constant coordinates duplicate the intercept
            spread = np.ptp(x, axis=0) > LSMC['rank_rtol'] * (1.0 + np.abs(x).max(axis=0))
            columns.append(x[:, spread])
        if features is not None:
            columns.append(np.asarray(features, dtype=float).reshape(self.paths, -1))
        X = PolynomialFeatures(degree=LSMC['degree']).fit_transform(np.concatenate(columns, axis=1))
        rank = np.linalg.matrix_rank(X, tol=LSMC['rank_rtol'] * np.abs(X).max() * max(X.shape))
        return X, rank

    def design(self, i: int) -> Tuple[np.ndarray, int]:
        """Cached regression basis at t_i with its numerical rank."""
        if i not in self._designs:
            X, rank = self.basis(i)
            if rank < X.shape[1] and self.state is not None:
                # a state that is a polynomial in W(t_i) adds nothing to the W basis
                logger.debug(f"Registered state is degenerate at node {i}; regressing on W only")
                X, rank = self.with_state(None).basis(i)
            self._designs[i] = (X, rank)
        return self._designs[i]

    def __repr__(self):
        return f"FilteredEnsemble({self.spec.model}, paths={self.paths}, grid={self.grid})"


def _tree_increments(grid: TimeGrid) -> np.ndarray:
    # step 0 is the most significant bit, so paths sharing a prefix are contiguous
    n = grid.steps
    bits = (np.arange(1 << n)[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    return ((1 - 2 * bits) * math.sqrt(grid.h)).astype(float)[:, :, None]


def _path_normals(seed: int, path: int, count: int) -> np.ndarray:
    generator = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, path, 0]))
    return generator.standard_normal(count)


def build_ensemble(grid: TimeGrid, spec: EnsembleSpec,
                   memory_budget_gb: float = DEFAULT_MEMORY_BUDGET_GB,
                   threads: int = 1) -> FilteredEnsemble:
    """Enumerate the tree or draw the Monte Carlo bundle; deterministic in (grid, spec)."""
    if spec.model == 'tree':
        if spec.dim > MAX_TREE_DIMENSION:
            raise ConfigError(ERROR_MESSAGES['tree_dimension'].format(d=spec.dim))
        if grid.steps > MAX_TREE_STEPS:
            raise ConfigError(ERROR_MESSAGES['tree_steps'].format(limit=MAX_TREE_STEPS, steps=grid.steps))
        paths = 1 << grid.steps
    else:
        paths = spec.paths
    # a dense Z grid for a scalar equation is the largest array any solver keeps
    ensure_budget(8.0 * paths * (grid.steps + 1) * grid.steps * spec.dim, memory_budget_gb)

    if spec.model == 'tree':
        increments = _tree_increments(grid)
    else:
        count = grid.steps * spec.dim
        rows = parallel_rows(lambda p: _path_normals(spec.seed, p, count), range(paths), threads)
        increments = np.stack(rows).reshape(paths, grid.steps, spec.dim) * math.sqrt(grid.h)
    ensemble = FilteredEnsemble(grid, spec, increments, memory_budget_gb)
    logger.info(f"Built {spec.model} ensemble: {paths} paths, N={grid.steps}, h={grid.h:.6g}")
    return ensemble


def parallel_rows(fn: Callable, items: Iterable, threads: int = 1) -> List:
    """Map fn over items, in order, on up to `threads` workers."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Conditional expectation
# ---------------------------------------------------------------------------

def _regress(X: np.ndarray, rank: int, targets: np.ndarray) -> np.ndarray:
    if rank < X.shape[1]:
        logger.warning(f"Regression basis is rank deficient ({rank} < {X.shape[1]}); "
                       f"using ridge penalty {LSMC['ridge_penalty']:g}")
        gram = X.T @ X + LSMC['ridge_penalty'] * np.eye(X.shape[1])
        coef = np.linalg.solve(gram, X.T @ targets)
    else:
        coef, *_ = np.linalg.lstsq(X, targets, rcond=None)
    return X @ coef


def cond_expect(ens: FilteredEnsemble, payoff: np.ndarray, i: int,
                features: Optional[np.ndarray] = None) -> np.ndarray:
    """E[payoff | F_{t_i}] on every path; payoff has paths on axis 0 and any trailing shape."""
    payoff = np.asarray(payoff, dtype=float)
    shape = payoff.shape
    if ens.is_tree:
        groups = 1 << i
        block = ens.paths >> i
        means = payoff.reshape(groups, block, -1).mean(axis=1)
        return np.repeat(means, block, axis=0).reshape(shape)
    flat = payoff.reshape(shape[0], -1)
    if i == 0:
        return np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(shape).copy()
    X, rank = ens.design(i) if features is None else ens.basis(i, features)
    return _regress(X, rank, flat).reshape(shape)


def martingale_represent(ens: FilteredEnsemble, payoff: np.ndarray, start: int = 0,
                         end: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Integrands Z_j = E[payoff dW_j | F_{s_j}] / h for start <= j < end, plus the residual.

    The residual is payoff - E_{t_start}[payoff] - sum_j Z_j dW_j, exactly zero on
    trees whenever payoff is F_{t_end}-measurable.
    """
    payoff = np.asarray(payoff, dtype=float)
    end = ens.steps if end is None else end
    trailing = payoff.shape[1:]
    Z = np.zeros((ens.paths, max(end - start, 0)) + trailing + (ens.dim,))
    residual = payoff - cond_expect(ens, payoff, start)
    for j in range(start, end):
        dw = ens.dW[:, j, :].reshape((ens.paths,) + (1,) * len(trailing) + (ens.dim,))
        Z[:, j - start] = cond_expect(ens, payoff[..., None] * dw, j) / ens.h
        residual = residual - np.sum(Z[:, j - start] * dw, axis=-1)
    return Z, residual


# ---------------------------------------------------------------------------
# Weighted norms
# ---------------------------------------------------------------------------

def weighted_sq_norm(ens: FilteredEnsemble, values: np.ndarray, beta: float) -> Tuple[float, float]:
    """Left-rectangle estimate of E int e^{2 beta t}|v|^2 dt over the grid, with its square root."""
    values = np.asarray(values, dtype=float)
    n = ens.steps
    sq = np.sum(values[:, :n].reshape(ens.paths, n, -1) ** 2, axis=2)
    total = float(np.sum(ens.expect(sq) * np.exp(2.0 * beta * ens.nodes[:n])) * ens.h)
    return total, math.sqrt(total)


def weighted_sq_norm_two(ens: FilteredEnsemble, values: np.ndarray, beta: float) -> Tuple[float, float]:
    """Two-parameter analogue: sum over i, j < N of e^{2 beta t_i} E|z_ij|^2 h^2."""
    values = np.asarray(values, dtype=float)
    n = ens.steps
    sq = np.sum(values[:, :n, :n].reshape(ens.paths, n, n, -1) ** 2, axis=3)
    rows = ens.expect(sq).sum(axis=1)
    total = float(np.sum(rows * np.exp(2.0 * beta * ens.nodes[:n])) * ens.h ** 2)
    return total, math.sqrt(total)


# ---------------------------------------------------------------------------
# Processes
# ---------------------------------------------------------------------------

def is_adapted(ens: FilteredEnsemble, values: np.ndarray, tol: float = 0.0) -> bool:
    """Tree certificate: v(., t_i) constant on paths sharing the first i increments."""
    if not ens.is_tree:
        return True
    values = np.asarray(values, dtype=float)
    for i in range(min(values.shape[1], ens.steps + 1)):
        column = values[:, i].reshape(1 << i, ens.paths >> i, -1)
        if np.max(np.abs(column - column.mean(axis=1, keepdims=True)), initial=0.0) > tol:
            return False
    return True


def random_adapted(ens: FilteredEnsemble, shape: Tuple[int, ...] = (1,),
                   rng: Optional[np.random.Generator] = None, scale: float = 1.0) -> np.ndarray:
    """Random adapted process of trailing shape `shape` on every node."""
    rng = rng or np.random.default_rng(0)
    out = np.empty((ens.paths, ens.steps + 1) + tuple(shape))
    for i in range(ens.steps + 1):
        if ens.is_tree:
            blocks = rng.standard_normal((1 << i,) + tuple(shape)) * scale
            out[:, i] = np.repeat(blocks, ens.paths >> i, axis=0)
        else:
            w = ens.W[:, i, :].sum(axis=1).reshape((ens.paths,) + (1,) * len(shape))
            a, b, c = (rng.standard_normal(shape) * scale for _ in range(3))
            out[:, i] = a + b * w + 0.1 * c * w ** 2
    return out


@dataclass
class AdaptedProcess:
    """Per-path values v(path, t_i) of shape (P, N+1, n)."""

    values: np.ndarray
    grid: TimeGrid
    name: str = 'value'

    def is_adapted(self, ens: FilteredEnsemble, tol: float = 1e-12) -> bool:
        return is_adapted(ens, self.values, tol)

    def to_frame(self) -> pd.DataFrame:
        """Long CSV layout: path, t, value columns."""
        paths, nodes = self.values.shape[:2]
        flat = self.values.reshape(paths * nodes, -1)
        frame = pd.DataFrame({
            'path': np.repeat(np.arange(paths), nodes),
            't': np.tile(self.grid.nodes[:nodes], paths),
        })
        columns = [self.name] if flat.shape[1] == 1 else [f"{self.name}_{k}" for k in range(flat.shape[1])]
        for k, column in enumerate(columns):
            frame[column] = flat[:, k]
        return frame


@dataclass
class TwoParameterProcess:
    """Per-path values z(path, t_i, s_j) of shape (P, N+1, N, ...)."""

    values: np.ndarray
    grid: TimeGrid
    name: str = 'Z'
    derived: bool = False
    meta: Dict = field(default_factory=dict)

    def row(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def is_adapted_in_s(self, ens: FilteredEnsemble, tol: float = 1e-12) -> bool:
        """z(., t_i, s_j) must be F_{s_j}-measurable for every row."""
        if not ens.is_tree:
            return True
        for j in range(self.values.shape[2]):
            column = self.values[:, :, j].reshape(1 << j, ens.paths >> j, -1)
            if np.max(np.abs(column - column.mean(axis=1, keepdims=True)), initial=0.0) > tol:
                return False
        return True
