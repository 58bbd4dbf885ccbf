"""
BSVIE Solver - Adapted M-Solutions by Picard Iteration and Continuation
Computes (Y, Z) for discounted Type-I/Type-II backward stochastic Volterra integral equations on a filtered ensemble.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate

from solvers.exceptions import ConvergenceError, HorizonError, InadmissibleError
from solvers.kernel_calculus import DomainReport, Kernel, bsvie_domain
from solvers.solver_config import APRIORI_TOL, DEFAULT_SOLVER_OPTIONS, ERROR_MESSAGES
from solvers.stochastic_core import (
    AdaptedProcess,
    FilteredEnsemble,
    TwoParameterProcess,
    cond_expect,
    parallel_rows,
    weighted_sq_norm,
    weighted_sq_norm_two,
)

logger = logging.getLogger(__name__)


@dataclass
class Driver:
    """Driver g(t, s, y, z1, z2) with its Lipschitz envelopes.

    `func` receives the row time t (scalar), column times s of shape (J,),
    y of shape (P, J, m) and z1 = Z(t, s), z2 = Z(s, t) of shape (P, J, m, d);
    it returns (P, J, m). A declared `factor` makes the driver
    factor(s - t) * func(...) and the cell integral of the factor is used.
    """

    func: Callable
    g_y: Kernel = field(default_factory=Kernel.zero)
    g_z1: Kernel = field(default_factory=Kernel.zero)
    g_z2: Kernel = field(default_factory=Kernel.zero)
    factor: Optional[Kernel] = None
    name: str = 'g'

    def multipliers(self, h: float, steps: int) -> np.ndarray:
        """Weight per column offset l = j - i, relative to the plain rectangle h."""
        if self.factor is None:
            return np.ones(steps + 1)
        return self.factor.cell_integrals(h, steps + 1) / h


def linear_driver(c_y: float = 0.0, c_z1: float = 0.0, c_z2: float = 0.0, offset: float = 0.0) -> Driver:
    """g = c_y y + c_z1 sum_k z1^k + c_z2 sum_k z2^k + offset."""
    def g(t, s, y, z1, z2):
        out = c_y * y + c_z1 * z1.sum(axis=-1) + c_z2 * z2.sum(axis=-1)
        return out + offset if offset else out

    def envelope(c):
        return Kernel.constant(abs(c)) if c else Kernel.zero()

    return Driver(g, envelope(c_y), envelope(c_z1), envelope(c_z2), name='linear')


@dataclass
class BsvieProblem:
    """Free term psi (need not be adapted), driver, discount lam and solution weight eta.

    `horizon` truncates the equation at T' <= T: psi is replaced by E_{T'}[psi]
    on [0, T'] and by zero beyond, and driver sums stop at T'. With
    `diagonal=False` the driver sum skips the cell s = t.
    """

    m: int
    psi: Union[float, np.ndarray, Callable] = 0.0
    driver: Optional[Driver] = None
    lam: float = 1.0
    eta: float = 0.0
    horizon: Optional[float] = None
    diagonal: bool = True

    def cutoff(self, ens: FilteredEnsemble) -> int:
        if self.horizon is None:
            return ens.steps
        return ens.grid.index(self.horizon)

    def free_term(self, ens: FilteredEnsemble) -> np.ndarray:
        psi = self.psi(ens) if callable(self.psi) else np.asarray(self.psi, dtype=float)
        shape = (ens.paths, ens.steps + 1, self.m)
        if psi.ndim == 2 and self.m == 1 and psi.shape[0] == ens.paths:
            psi = psi[..., None]
        if psi.shape != shape:
            psi = np.broadcast_to(psi.reshape(-1) if psi.size == self.m else psi, shape)
        psi = np.array(psi, dtype=float)
        n_cut = self.cutoff(ens)
        if n_cut < ens.steps:
            psi[:, :n_cut + 1] = cond_expect(ens, psi[:, :n_cut + 1], n_cut)
            psi[:, n_cut + 1:] = 0.0
        return psi

    def domain(self) -> DomainReport:
        d = self.driver or Driver(lambda *a: 0.0)
        return bsvie_domain(d.g_y, d.g_z1, d.g_z2, self.eta, self.lam)


@dataclass
class SolverOptions:
    tol: Optional[float] = None
    max_iter: int = DEFAULT_SOLVER_OPTIONS['max_iter']
    mode: str = DEFAULT_SOLVER_OPTIONS['mode']
    initial: str = DEFAULT_SOLVER_OPTIONS['initial']
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ('auto', 'picard', 'continuation'):
            raise ValueError(f"Unknown iteration mode '{self.mode}'")
        if self.initial not in ('zero', 'psi'):
            raise ValueError(f"Unknown initial guess '{self.initial}'")


@dataclass
class MSolution:
    """Adapted M-solution with its diagnostics."""

    Y: np.ndarray
    Z: np.ndarray
    grid: object
    eta: float
    lam: float
    equation_residual: float = 0.0
    m_residual: float = 0.0
    trace: List[Dict] = field(default_factory=list)
    mode: str = 'trivial'

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def y_process(self) -> AdaptedProcess:
        return AdaptedProcess(self.Y, self.grid, name='Y')

    def z_process(self) -> TwoParameterProcess:
        return TwoParameterProcess(self.Z, self.grid, name='Z')

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        """Long tables: Y by (path, t), Z by (path, t, s) with one column per (m, d) entry."""
        Z = self.Z
        paths, rows, cols = Z.shape[:3]
        flat = Z.reshape(paths * rows * cols, -1)
        z_frame = pd.DataFrame({
            'path': np.repeat(np.arange(paths), rows * cols),
            't': np.tile(np.repeat(self.grid.nodes[:rows], cols), paths),
            's': np.tile(self.grid.nodes[:cols], paths * rows),
        })
        names = ['Z'] if flat.shape[1] == 1 else [f"Z_{k}" for k in range(flat.shape[1])]
        for k, name in enumerate(names):
            z_frame[name] = flat[:, k]
        return {'Y': self.y_process().to_frame(), 'Z': z_frame}

    def diagnostics(self) -> Dict:
        return {
            'equation_residual': self.equation_residual,
            'm_residual': self.m_residual,
            'iterations': self.iterations,
            'mode': self.mode,
            'eta': self.eta,
            'lambda': self.lam,
        }


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------

def represent(ens: FilteredEnsemble, xi: np.ndarray, Y: np.ndarray, threads: int = 1) -> np.ndarray:
    """Z(t_i, s_j) from xi_i for j >= i and from Y_i for j < i, shape (P, N+1, N, m, d)."""
    rows = np.arange(ens.steps + 1)[None, :, None]

    def column(j):
        payload = np.where(rows <= j, xi, Y)
        dw = ens.dW[:, j, :][:, None, None, :]
        return cond_expect(ens, payload[..., None] * dw, j) / ens.h

    columns = parallel_rows(column, range(ens.steps), threads)
    return np.stack(columns, axis=2)


def adapted_part(ens: FilteredEnsemble, xi: np.ndarray) -> np.ndarray:
    """Row-wise E_{t_i}[xi_i]."""
    Y = np.empty_like(xi)
    for i in range(ens.steps + 1):
        Y[:, i] = cond_expect(ens, xi[:, i], i)
    return Y


def driver_terms(p: BsvieProblem, ens: FilteredEnsemble, Y: np.ndarray, Z: np.ndarray,
                 threads: int = 1) -> np.ndarray:
    """Row sums sum_j e^{-lam(s_j - t_i)} g(t_i, s_j, Y_j, Z(t_i,s_j), Z(s_j,t_i)) h."""
    out = np.zeros((ens.paths, ens.steps + 1, p.m))
    if p.driver is None:
        return out
    n_cut = p.cutoff(ens)
    nodes, h = ens.nodes, ens.h
    mult = p.driver.multipliers(h, ens.steps)
    first = 0 if p.diagonal else 1

    def row(i):
        cols = np.arange(i + first, n_cut)
        if cols.size == 0:
            return np.zeros((ens.paths, p.m))
        s = nodes[cols]
        values = p.driver.func(nodes[i], s, Y[:, cols], Z[:, i, cols], Z[:, cols, i])
        weights = np.exp(-p.lam * (s - nodes[i])) * mult[cols - i] * h
        return np.einsum('j,pjm->pm', weights, values)

    rows = parallel_rows(row, range(n_cut), threads)
    for i, value in enumerate(rows):
        out[:, i] = value
    return out


def _distance(ens: FilteredEnsemble, eta: float, a: Tuple[np.ndarray, np.ndarray],
              b: Tuple[np.ndarray, np.ndarray]) -> float:
    dy = weighted_sq_norm(ens, a[0] - b[0], eta)[0]
    dz = weighted_sq_norm_two(ens, a[1] - b[1], eta)[0]
    return math.sqrt(dy + dz)


def m_constraint_residual(ens: FilteredEnsemble, Y: np.ndarray, Z: np.ndarray) -> float:
    """max |Y_i - E[Y_i] - sum_{j<i} Z(t_i,s_j) dW_j| over rows and paths."""
    worst = 0.0
    for i in range(ens.steps + 1):
        integral = np.einsum('pjmd,pjd->pm', Z[:, i, :i], ens.dW[:, :i])
        gap = Y[:, i] - ens.expect(Y[:, i])[None] - integral
        worst = max(worst, float(np.max(np.abs(gap), initial=0.0)))
    return worst


def _trivial(ens: FilteredEnsemble, xi: np.ndarray, threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    Y = adapted_part(ens, xi)
    return Y, represent(ens, xi, Y, threads)


def solve_trivial(psi: np.ndarray, ens: FilteredEnsemble, eta: float = 0.0, lam: float = 0.0,
                  threads: int = 1) -> MSolution:
    """Y(t_i) = E_{t_i}[psi(t_i)] and Z from the martingale representation of psi and Y."""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 2:
        psi = psi[..., None]
    Y, Z = _trivial(ens, psi, threads)
    residual = weighted_sq_norm(ens, Y - adapted_part(ens, psi), eta)[1]
    return MSolution(Y, Z, ens.grid, eta, lam, residual, m_constraint_residual(ens, Y, Z))


def _default_tol(p: BsvieProblem, ens: FilteredEnsemble, psi: np.ndarray) -> float:
    if ens.is_tree:
        return DEFAULT_SOLVER_OPTIONS['tree_tol']
    scale = weighted_sq_norm(ens, psi, p.eta)[1]
    return DEFAULT_SOLVER_OPTIONS['mc_relative_tol'] * (scale if scale > 0 else 1.0)


class _FixedPoint:
    """Picard sweeps and the continuation ladder for one problem."""

    def __init__(self, p: BsvieProblem, ens: FilteredEnsemble, psi: np.ndarray,
                 opts: SolverOptions, tol: float):
        self.p, self.ens, self.psi, self.opts, self.tol = p, ens, psi, opts, tol
        self.trace: List[Dict] = []

    def drive(self, state):
        return driver_terms(self.p, self.ens, state[0], state[1], self.opts.threads)

    def iterate(self, sweep: Callable, start, level: int, gamma: float, first=None):
        """Picard loop until the weighted distance of successive iterates is below tol."""
        current, last = start, first
        stalls = 0
        for k in range(self.opts.max_iter):
            nxt = sweep(current)
            dist = _distance(self.ens, self.p.eta, nxt, current)
            ratio = dist / last if last else math.nan
            self.trace.append({'level': level, 'gamma': gamma, 'iteration': k,
                               'distance': dist, 'ratio': ratio})
            logger.debug(f"level {level} sweep {k}: distance {dist:.3e} ratio {ratio:.3f}")
            if dist <= self.tol:
                return nxt
            stalls = stalls + 1 if last is not None and dist >= last else 0
            if stalls >= DEFAULT_SOLVER_OPTIONS['stall_window']:
                raise ConvergenceError(ERROR_MESSAGES['no_contraction'].format(count=stalls), self.trace)
            last, current = dist, nxt
        raise ConvergenceError(
            ERROR_MESSAGES['max_iter'].format(tol=self.tol, max_iter=self.opts.max_iter, dist=last or math.nan),
            self.trace)

    def solve_level(self, gammas: List[float], k: int, free: np.ndarray, warm):
        """Solution of Y = E[free + gammas[k] D(Y, Z)] by iterating the level below."""
        if k == 0:
            return _trivial(self.ens, free, self.opts.threads)
        step = gammas[k] - gammas[k - 1]

        def sweep(state):
            return self.solve_level(gammas, k - 1, free + step * self.drive(state), state)

        return self.iterate(sweep, warm, k, gammas[k])

    def plain(self):
        def sweep(state):
            return _trivial(self.ens, self.psi + self.drive(state), self.opts.threads)
        return sweep


def solve_bsvie(p: BsvieProblem, ens: FilteredEnsemble, opts: Optional[SolverOptions] = None) -> MSolution:
    """Adapted M-solution by plain Picard iteration or by continuation in the driver strength."""
    opts = opts or SolverOptions()
    report = p.domain()
    if not report.admissible:
        raise InadmissibleError(
            ERROR_MESSAGES['bsvie_inadmissible'].format(eta=p.eta, lam=p.lam, margin=report.margin),
            margin=report.margin, clause='driver_margin')
    ens.check_memory((ens.paths, ens.steps + 1, ens.steps, p.m, ens.dim))
    psi = p.free_term(ens)
    if p.driver is None:
        return solve_trivial(psi, ens, p.eta, p.lam, opts.threads)

    tol = opts.tol if opts.tol is not None else _default_tol(p, ens, psi)
    solver = _FixedPoint(p, ens, psi, opts, tol)
    zero = (np.zeros_like(psi), np.zeros((ens.paths, ens.steps + 1, ens.steps, p.m, ens.dim)))
    start = _trivial(ens, psi, opts.threads) if opts.initial == 'psi' else zero
    sweep = solver.plain()

    mode = opts.mode
    if mode == 'auto':
        first = sweep(start)
        d1 = _distance(ens, p.eta, first, start)
        second = sweep(first)
        d2 = _distance(ens, p.eta, second, first)
        ratio = d2 / d1 if d1 > 0 else 0.0
        solver.trace += [{'level': 1, 'gamma': 1.0, 'iteration': 0, 'distance': d1, 'ratio': math.nan},
                         {'level': 1, 'gamma': 1.0, 'iteration': 1, 'distance': d2, 'ratio': ratio}]
        if d2 <= tol:
            mode, state = 'picard', second
        elif ratio < DEFAULT_SOLVER_OPTIONS['auto_ratio']:
            mode = 'picard'
            state = solver.iterate(sweep, second, 1, 1.0, first=d2)
        else:
            mode = 'continuation'
            logger.info(f"Measured contraction ratio {ratio:.3f}; switching to continuation")
    if mode == 'picard' and opts.mode == 'picard':
        state = solver.iterate(sweep, start, 1, 1.0)
    if mode == 'continuation':
        delta = DEFAULT_SOLVER_OPTIONS['continuation_safety'] / report.contraction_constant
        levels = int(math.ceil(1.0 / delta))
        gammas = [min(k * delta, 1.0) for k in range(levels)] + [1.0]
        logger.info(f"Continuation with {levels} level(s), step {delta:.4f}")
        state = solver.solve_level(gammas, len(gammas) - 1, psi, start)

    Y, Z = state
    eq_residual = weighted_sq_norm(ens, Y - adapted_part(ens, psi + solver.drive(state)), p.eta)[1]
    sol = MSolution(Y, Z, ens.grid, p.eta, p.lam, eq_residual, m_constraint_residual(ens, Y, Z),
                    solver.trace, mode)
    logger.info(f"BSVIE solved by {mode} in {sol.iterations} sweep(s); residual {eq_residual:.3e}")
    return sol


# ---------------------------------------------------------------------------
# Horizon and estimates
# ---------------------------------------------------------------------------

def _tail_sq(second_moment: Callable[[float], float], eta: float, start: float) -> float:
    result = integrate.quad(lambda t: math.exp(2.0 * eta * t) * second_moment(t), start, np.inf,
                            limit=200, full_output=1)
    value = result[0]
    message = result[3] if len(result) > 3 else ''
    if not math.isfinite(value) or 'divergent' in str(message):
        raise HorizonError(ERROR_MESSAGES['tail_not_decaying'])
    return max(value, 0.0)


def truncate_horizon(second_moment: Optional[Callable[[float], float]], eta: float, tol: float,
                     step: float, c_eta_lambda: float = math.sqrt(2.0),
                     support_end: Optional[float] = None, max_horizon: float = 1e4) -> float:
    """Smallest grid-representable T with C * (int_T^inf e^{2 eta t} E|psi(t)|^2 dt)^{1/2} <= tol."""
    if math.isinf(tol):
        return step
    if support_end is not None:
        return max(1, math.ceil(support_end / step - 1e-12)) * step
    if second_moment is None:
        raise HorizonError(ERROR_MESSAGES['tail_not_decaying'])

    def small_enough(k: int) -> bool:
        return c_eta_lambda * math.sqrt(_tail_sq(second_moment, eta, k * step)) <= tol

    hi = 1
    while not small_enough(hi):
        hi *= 2
        if hi * step > max_horizon:
            raise HorizonError(ERROR_MESSAGES['tail_not_decaying'])
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if small_enough(mid):
            hi = mid
        else:
            lo = mid
    return hi * step


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    ok: bool
    constant: float

    def to_dict(self) -> Dict:
        return {'lhs': self.lhs, 'rhs': self.rhs, 'ok': self.ok, 'constant': self.constant}


def apriori_check(sol: MSolution, p: BsvieProblem, ens: FilteredEnsemble,
                  tol: float = APRIORI_TOL) -> AprioriReport:
    """||(Y, Z)|| <= C_{eta,lam} ||psi + G(0,0,0)|| at weight eta."""
    report = p.domain()
    lhs = math.sqrt(weighted_sq_norm(ens, sol.Y, p.eta)[0] + weighted_sq_norm_two(ens, sol.Z, p.eta)[0])
    psi = p.free_term(ens)
    zero_y = np.zeros_like(psi)
    zero_z = np.zeros((ens.paths, ens.steps + 1, ens.steps, p.m, ens.dim))
    rhs = report.contraction_constant * weighted_sq_norm(ens, psi + driver_terms(p, ens, zero_y, zero_z), p.eta)[1]
    return AprioriReport(lhs, rhs, lhs <= rhs * (1.0 + tol), report.contraction_constant)
