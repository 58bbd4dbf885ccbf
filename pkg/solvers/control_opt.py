"""
Control Optimization - Discounted Stochastic Control of SVIEs
Cost functional, adjoint BSVIE, Hamiltonian stationarity residual, projected-gradient search and the worked example families.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from solvers.bsvie_solver import BsvieProblem, Driver, MSolution, SolverOptions, solve_bsvie
from solvers.exceptions import InadmissibleError
from solvers.kernel_calculus import (
    DomainReport,
    Kernel,
    caputo_kernels,
    control_domain,
    invert_rate,
    weighted_norm,
)
from solvers.linear_volterra import bsvie_to_bsde, discounted_pairing, matrix_at
from solvers.solver_config import ADJOINT_TOL, ARMIJO, DEFAULT_OPTIMIZE_OPTIONS, ERROR_MESSAGES
from solvers.stochastic_core import FilteredEnsemble, cond_expect, weighted_sq_norm
from solvers.svie_forward import Coefficient, SvieProblem, linear_diffusion, linear_drift, solve_svie

logger = logging.getLogger(__name__)


def identity(u: np.ndarray) -> np.ndarray:
    return u


def box_projection(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise projection onto [lo, hi]^l."""
    def project(u):
        return np.clip(u, lo, hi)
    return project


@dataclass
class RunningCost:
    """Running cost h(t, x, u) with partials; t has shape (J,), x (P, J, n), u (P, J, l)."""

    func: Callable
    dx: Callable
    du: Callable
    growth: float = 1.0
    name: str = 'h'


def quadratic_cost(M1, M2, M3=None) -> RunningCost:
    """h = 1/2 <M1 x, x> + <M3 x, u> + 1/2 <M2 u, u>."""
    M1 = np.atleast_2d(np.asarray(M1, dtype=float))
    M2 = np.atleast_2d(np.asarray(M2, dtype=float))
    M3 = np.zeros((M2.shape[0], M1.shape[0])) if M3 is None else np.atleast_2d(np.asarray(M3, dtype=float))

    def func(t, x, u):
        return (0.5 * np.einsum('pja,ab,pjb->pj', x, M1, x)
                + np.einsum('pjc,ca,pja->pj', u, M3, x)
                + 0.5 * np.einsum('pjc,ce,pje->pj', u, M2, u))

    def dx(t, x, u):
        return np.einsum('ab,pjb->pja', M1, x) + np.einsum('ca,pjc->pja', M3, u)

    def du(t, x, u):
        return np.einsum('ce,pje->pjc', M2, u) + np.einsum('ca,pja->pjc', M3, x)

    growth = float(max(np.linalg.norm(M1, 2), np.linalg.norm(M2, 2), np.linalg.norm(M3, 2)))
    return RunningCost(func, dx, du, growth, name='quadratic')


@dataclass
class ControlProblem:
    """Controlled SVIE with discounted running cost.

    `kernels` holds the envelopes b_x, b_u, sigma_x, sigma_u. `domain_override`,
    when set, replaces the generic weight/discount test and is called with (mu, lam).
    """

    n: int
    l: int
    drift: Coefficient
    diffusion: Optional[Coefficient]
    running_cost: RunningCost
    kernels: Dict[str, Kernel]
    phi: Union[float, np.ndarray, Callable] = 0.0
    mu: float = 0.5
    lam: float = 1.0
    projection: Callable = identity
    adjoint_envelopes: Optional[Tuple[Kernel, Kernel]] = None
    domain_override: Optional[Callable[[float, float], DomainReport]] = None
    convex: bool = False
    meta: Dict = field(default_factory=dict)

    def domain(self) -> DomainReport:
        if self.domain_override is not None:
            return self.domain_override(self.mu, self.lam)
        return control_domain(self.kernels, self.mu, self.lam)

    def state_problem(self, u: np.ndarray) -> SvieProblem:
        return SvieProblem(self.n, self.phi, self.drift, self.diffusion, control=u, mu=self.mu)

    def state(self, u: np.ndarray, ens: FilteredEnsemble) -> np.ndarray:
        return solve_svie(self.state_problem(u), ens, check=False).values

    def zero_control(self, ens: FilteredEnsemble) -> np.ndarray:
        return np.zeros((ens.paths, ens.steps + 1, self.l))


def require_admissible(p: ControlProblem) -> DomainReport:
    report = p.domain()
    if not report.admissible:
        raise InadmissibleError(
            ERROR_MESSAGES['control_inadmissible'].format(mu=p.mu, lam=p.lam, clauses=report.failed_clauses),
            margin=report.margin, clause=','.join(report.failed_clauses))
    return report


def feasible_control(p: ControlProblem, u, ens: FilteredEnsemble) -> np.ndarray:
    """Control array of shape (P, N+1, l), projected onto U with a warning when it leaves U."""
    values = np.asarray(getattr(u, 'values', u), dtype=float)
    shape = (ens.paths, ens.steps + 1, p.l)
    if values.ndim == 2 and p.l == 1:
        values = values[..., None]
    values = np.broadcast_to(values, shape).copy()
    projected = p.projection(values)
    if not np.allclose(projected, values, rtol=0.0, atol=1e-14):
        logger.warning(f"Control leaves the admissible set by up to {np.max(np.abs(projected - values)):.3e}; projecting")
        return np.asarray(projected, dtype=float)
    return values


def _running_cost(p: ControlProblem, ens: FilteredEnsemble, X: np.ndarray, u: np.ndarray) -> float:
    n = ens.steps
    values = p.running_cost.func(ens.nodes[:n], X[:, :n], u[:, :n])
    return float(np.sum(ens.expect(values) * np.exp(-p.lam * ens.nodes[:n])) * ens.h)


def cost(p: ControlProblem, u, ens: FilteredEnsemble) -> float:
    """J(u) = E sum_{i<N} e^{-lam t_i} h(t_i, X_i, u_i) h."""
    require_admissible(p)
    u = feasible_control(p, u, ens)
    return _running_cost(p, ens, p.state(u, ens), u)


def _row_arguments(X: np.ndarray, u: np.ndarray, j: int, count: int):
    x = np.broadcast_to(X[:, j:j + 1], (X.shape[0], count, X.shape[2]))
    v = np.broadcast_to(u[:, j:j + 1], (u.shape[0], count, u.shape[2]))
    return x, v


# ---------------------------------------------------------------------------
# Adjoint and stationarity
# ---------------------------------------------------------------------------

def adjoint_solve(p: ControlProblem, u, X: np.ndarray, ens: FilteredEnsemble,
                  opts: Optional[SolverOptions] = None) -> MSolution:
    """Type-II adjoint with free term h_x and driver b_x(s,t)^T y + sum_k sigma^k_x(s,t)^T z2^k."""
    require_admissible(p)
    u = feasible_control(p, u, ens)
    ens = ens.with_state(X)
    h, steps, nodes = ens.h, ens.steps, ens.nodes
    psi = p.running_cost.dx(nodes, X, u)
    cache: Dict[int, Tuple] = {}

    def jacobians(j: int, s: np.ndarray):
        if j not in cache:
            x, v = _row_arguments(X, u, j, s.shape[0])
            bx = p.drift.jac_x(h, steps, s, nodes[j], x, v)
            sx = p.diffusion.jac_x(h, steps, s, nodes[j], x, v) if p.diffusion is not None else None
            cache[j] = (bx, sx)
        return cache[j]

    def g(t, s, y, z1, z2):
        bx, sx = jacobians(int(round(t / h)), s)
        out = np.einsum('pjab,pja->pjb', bx, y)
        if sx is not None:
            out = out + np.einsum('pjakb,pjak->pjb', sx, z2)
        return out

    ky, kz = p.adjoint_envelopes or (p.kernels.get('b_x', Kernel.zero()), p.kernels.get('sigma_x', Kernel.zero()))
    problem = BsvieProblem(p.n, psi, Driver(g, g_y=ky, g_z2=kz, name='adjoint'), lam=p.lam, eta=-p.mu,
                           diagonal=False)
    if opts is None:
        opts = SolverOptions(tol=ADJOINT_TOL if ens.is_tree else None, mode='picard')
    return solve_bsvie(problem, ens, opts)


def hamiltonian_gradient(p: ControlProblem, ens: FilteredEnsemble, X: np.ndarray, u: np.ndarray,
                         sol: MSolution) -> np.ndarray:
    """G_j = h_u(j) + sum_{i>j} e^{-lam(t_i-t_j)} {b_u(t_i,t_j)^T E_j Y_i + sum_k sigma^k_u(t_i,t_j)^T Z^k(t_i,t_j)} h."""
    ens = ens.with_state(X)
    h, steps, nodes = ens.h, ens.steps, ens.nodes
    G = np.zeros((ens.paths, steps + 1, p.l))
    if p.l == 0:
        return G
    G[:, :steps] = p.running_cost.du(nodes[:steps], X[:, :steps], u[:, :steps])
    for j in range(steps - 1):
        cols = np.arange(j + 1, steps)
        x, v = _row_arguments(X, u, j, cols.size)
        weights = np.exp(-p.lam * (nodes[cols] - nodes[j])) * h
        bu = p.drift.jac_u(h, steps, nodes[cols], nodes[j], x, v)
        EY = cond_expect(ens, sol.Y[:, cols], j)
        G[:, j] += np.einsum('j,pjac,pja->pc', weights, bu, EY)
        if p.diffusion is not None:
            su = p.diffusion.jac_u(h, steps, nodes[cols], nodes[j], x, v)
            G[:, j] += np.einsum('j,pjakc,pjak->pc', weights, su, sol.Z[:, cols, j])
    return G


@dataclass
class OptimalityReport:
    cost: float
    gradient: np.ndarray
    residual: float
    gradient_norm: float
    adjoint: Dict = field(default_factory=dict)
    convex: bool = False
    state: Optional[np.ndarray] = field(default=None, repr=False)
    solution: Optional[MSolution] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            'cost': self.cost,
            'residual': self.residual,
            'gradient_norm': self.gradient_norm,
            'adjoint': self.adjoint,
            'convexity_certificate': self.convex,
        }


def _lambda_norm(ens: FilteredEnsemble, values: np.ndarray, lam: float) -> float:
    return weighted_sq_norm(ens, values, -0.5 * lam)[1]


def stationarity_residual(p: ControlProblem, u, ens: FilteredEnsemble,
                          opts: Optional[SolverOptions] = None) -> OptimalityReport:
    """G and r = ||u - Pi_U(u - G)|| in the e^{-lam t} weighted norm."""
    require_admissible(p)
    u = feasible_control(p, u, ens)
    X = p.state(u, ens)
    sol = adjoint_solve(p, u, X, ens, opts)
    G = hamiltonian_gradient(p, ens, X, u, sol)
    r = _lambda_norm(ens, u - p.projection(u - G), p.lam)
    return OptimalityReport(_running_cost(p, ens, X, u), G, r, _lambda_norm(ens, G, p.lam),
                            sol.diagnostics(), p.convex, X, sol)


# ---------------------------------------------------------------------------
# Projected gradient
# ---------------------------------------------------------------------------

@dataclass
class OptimizeOptions:
    tol: float = DEFAULT_OPTIMIZE_OPTIONS['tol']
    max_iter: int = DEFAULT_OPTIMIZE_OPTIONS['max_iter']


@dataclass
class OptimizeResult:
    control: np.ndarray
    trace: List[Dict]
    report: OptimalityReport
    status: str

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=['iteration', 'cost', 'residual', 'step', 'backtracks'])


def optimize(p: ControlProblem, u0, ens: FilteredEnsemble,
             opts: Optional[OptimizeOptions] = None) -> OptimizeResult:
    """u <- Pi_U(u - gamma G) with Armijo backtracking on J."""
    opts = opts or OptimizeOptions()
    u = feasible_control(p, u0, ens)
    report = stationarity_residual(p, u, ens)
    trace = [{'iteration': 0, 'cost': report.cost, 'residual': report.residual, 'step': 0.0, 'backtracks': 0}]
    status = 'max_iter'
    for k in range(1, opts.max_iter + 1):
        if report.residual < opts.tol:
            status = 'converged'
            break
        gamma, accepted = ARMIJO['initial_step'], None
        for backtrack in range(ARMIJO['max_backtracks'] + 1):
            trial = np.asarray(p.projection(u - gamma * report.gradient), dtype=float)
            slope = discounted_pairing(ens, report.gradient, trial - u, p.lam)
            trial_cost = _running_cost(p, ens, p.state(trial, ens), trial)
            if trial_cost <= report.cost + ARMIJO['c'] * slope:
                accepted = (trial, backtrack)
                break
            gamma *= ARMIJO['shrink']
        if accepted is None:
            status = 'stalled'
            logger.warning(ERROR_MESSAGES['stalled'].format(count=ARMIJO['max_backtracks'], iteration=k))
            break
        u = accepted[0]
        report = stationarity_residual(p, u, ens)
        trace.append({'iteration': k, 'cost': report.cost, 'residual': report.residual,
                      'step': gamma, 'backtracks': accepted[1]})
        logger.debug(f"iteration {k}: cost {report.cost:.10g} residual {report.residual:.3e} step {gamma:g}")
    else:
        if report.residual < opts.tol:
            status = 'converged'
    logger.info(f"Optimization {status} after {len(trace) - 1} iteration(s): "
                f"cost {report.cost:.10g}, residual {report.residual:.3e}")
    return OptimizeResult(u, trace, report, status)


def gradient_check(p: ControlProblem, u, ens: FilteredEnsemble, directions: List[np.ndarray],
                   eps: float = 1e-4) -> List[Dict]:
    """Adjoint pairing <G, du> against the central difference of J along each direction."""
    u = feasible_control(p, u, ens)
    report = stationarity_residual(p, u, ens)
    rows = []
    for direction in directions:
        direction = np.asarray(direction, dtype=float).reshape(u.shape)
        pairing = discounted_pairing(ens, report.gradient, direction, p.lam)
        up = _running_cost(p, ens, p.state(u + eps * direction, ens), u + eps * direction)
        down = _running_cost(p, ens, p.state(u - eps * direction, ens), u - eps * direction)
        fd = (up - down) / (2.0 * eps)
        rel = abs(pairing - fd) / max(abs(fd), abs(pairing), 1e-300)
        rows.append({'pairing': pairing, 'finite_difference': fd, 'relative_error': rel})
    return rows


def variational_pairing(p: ControlProblem, u, direction: np.ndarray, ens: FilteredEnsemble) -> Tuple[float, float]:
    """dJ along `direction` from the variational SVIE and from the adjoint pairing."""
    u = feasible_control(p, u, ens)
    direction = np.asarray(direction, dtype=float).reshape(u.shape)
    h, steps = ens.h, ens.steps
    X = p.state(u, ens)

    def frozen(s):
        cols = np.rint(np.asarray(s) / h).astype(int)
        return X[:, cols], u[:, cols]

    def drift(t, s, dx, dv):
        xs, us = frozen(s)
        out = np.einsum('pjab,pjb->pja', p.drift.jac_x(h, steps, t, s, xs, us), dx)
        if p.l:
            out = out + np.einsum('pjac,pjc->pja', p.drift.jac_u(h, steps, t, s, xs, us), dv)
        return out

    def diffusion(t, s, dx, dv):
        xs, us = frozen(s)
        out = np.einsum('pjakb,pjb->pjak', p.diffusion.jac_x(h, steps, t, s, xs, us), dx)
        if p.l:
            out = out + np.einsum('pjakc,pjc->pjak', p.diffusion.jac_u(h, steps, t, s, xs, us), dv)
        return out

    variation = SvieProblem(p.n, 0.0, Coefficient(drift, name='delta-b'),
                            Coefficient(diffusion, name='delta-sigma') if p.diffusion is not None else None,
                            control=direction, mu=p.mu)
    dX = solve_svie(variation, ens, check=False).values
    n = steps
    disc = np.exp(-p.lam * ens.nodes[:n])
    hx = p.running_cost.dx(ens.nodes[:n], X[:, :n], u[:, :n])
    hu = p.running_cost.du(ens.nodes[:n], X[:, :n], u[:, :n])
    inner = np.einsum('pia,pia->pi', hx, dX[:, :n]) + np.einsum('pic,pic->pi', hu, direction[:, :n])
    via_variation = float(np.sum(ens.expect(inner) * disc) * h)
    report = stationarity_residual(p, u, ens)
    via_adjoint = discounted_pairing(ens, report.gradient, direction, p.lam)
    return via_variation, via_adjoint


# ---------------------------------------------------------------------------
# Linear-quadratic family
# ---------------------------------------------------------------------------

def _envelope(norm: float, factor: Optional[Kernel]) -> Kernel:
    if norm == 0.0:
        return Kernel.zero()
    return factor.scaled(norm) if factor is not None else Kernel.constant(norm)


def _diffusion_norm(M: Optional[np.ndarray]) -> float:
    if M is None:
        return 0.0
    return float(np.sqrt(sum(np.linalg.norm(M[:, k, :], 2) ** 2 for k in range(M.shape[1]))))


def make_lq_problem(A, B, M1, M2, C=None, D=None, M3=None, x0=1.0, mu: float = 0.5, lam: float = 1.0,
                    factor: Optional[Kernel] = None, projection: Callable = identity) -> ControlProblem:
    """b = A x + B u, sigma^k = C^k x + D^k u (optionally times factor(t-s)), quadratic running cost.

    C has shape (n, d, n) and D shape (n, d, l).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, l = A.shape[0], B.shape[1]
    C = None if C is None else np.asarray(C, dtype=float).reshape(n, -1, n)
    D = None if D is None else np.asarray(D, dtype=float).reshape(n, -1, l)
    d = C.shape[1] if C is not None else (D.shape[1] if D is not None else 1)
    drift = linear_drift(A, B, factor=factor, envelope=_envelope(float(np.linalg.norm(A, 2)), factor), name='b')
    diffusion = None
    if C is not None or D is not None:
        diffusion = linear_diffusion(C if C is not None else np.zeros((n, d, n)), D, factor=factor,
                                     envelope=_envelope(_diffusion_norm(C), factor), name='sigma')
    running = quadratic_cost(M1, M2, M3)
    M1a, M2a = np.atleast_2d(np.asarray(M1, dtype=float)), np.atleast_2d(np.asarray(M2, dtype=float))
    M3a = np.zeros((l, n)) if M3 is None else np.atleast_2d(np.asarray(M3, dtype=float))
    block = np.block([[M1a, M3a.T], [M3a, M2a]])
    convex = bool(np.min(np.linalg.eigvalsh(0.5 * (block + block.T))) >= -1e-12)
    kernels = {
        'b_x': _envelope(float(np.linalg.norm(A, 2)), factor),
        'b_u': _envelope(float(np.linalg.norm(B, 2)), factor),
        'sigma_x': _envelope(_diffusion_norm(C), factor),
        'sigma_u': _envelope(_diffusion_norm(D), factor),
    }
    meta = {'form': 'lq', 'A': A, 'B': B, 'C': C, 'D': D, 'M1': M1a, 'M2': M2a, 'M3': M3a, 'factor': factor}
    return ControlProblem(n, l, drift, diffusion, running, kernels, np.broadcast_to(np.asarray(x0, float), (n,)),
                          mu, lam, projection, convex=convex, meta=meta)


def lq_condition(p: ControlProblem, u, ens: FilteredEnsemble) -> np.ndarray:
    """M2 u + M3 X + sum_{i>j} e^{-lam(t_i-t_j)} w_{i-j} (B^T E_j Y_i + sum_k D_k^T Z^k(t_i,t_j)) h from the LQ matrices."""
    meta = p.meta
    u = feasible_control(p, u, ens)
    X = p.state(u, ens)
    sol = adjoint_solve(p, u, X, ens)
    ens = ens.with_state(X)
    h, steps, nodes = ens.h, ens.steps, ens.nodes
    factor = meta['factor']
    mult = np.ones(steps + 1)
    if factor is not None:
        mult[1:] = factor.cell_integrals(h, steps) / h
    out = np.zeros_like(u)
    out[:, :steps] = (np.einsum('ce,pje->pjc', meta['M2'], u[:, :steps])
                      + np.einsum('ca,pja->pjc', meta['M3'], X[:, :steps]))
    for j in range(steps - 1):
        cols = np.arange(j + 1, steps)
        weights = np.exp(-p.lam * (nodes[cols] - nodes[j])) * mult[cols - j] * h
        EY = cond_expect(ens, sol.Y[:, cols], j)
        out[:, j] += np.einsum('j,ac,pja->pc', weights, meta['B'], EY)
        if meta['D'] is not None:
            out[:, j] += np.einsum('j,akc,pjak->pc', weights, meta['D'], sol.Z[:, cols, j])
    return out


# ---------------------------------------------------------------------------
# SDE and Caputo families
# ---------------------------------------------------------------------------

def _factored(parts, factor: Kernel, envelope: Kernel, name: str) -> Optional[Coefficient]:
    if parts is None:
        return None
    func, dx, du = parts
    return Coefficient(func, envelope, factor, dx, du, name)


def make_sde_problem(b, sigma, running_cost: RunningCost, lipschitz: Dict[str, float], x0=1.0,
                     mu: float = 0.5, lam: float = 1.0, n: int = 1, l: int = 1,
                     projection: Callable = identity) -> ControlProblem:
    """Classical controlled SDE: b and sigma are (func, dx, du) triples of (s, x, u)."""
    unit = Kernel.constant(1.0)
    kernels = {key: _envelope(float(lipschitz.get(key, 0.0)), None) for key in ('b_x', 'b_u', 'sigma_x', 'sigma_u')}
    drift = _factored(b, unit, kernels['b_x'], 'b')
    diffusion = _factored(sigma, unit, kernels['sigma_x'], 'sigma')
    return ControlProblem(n, l, drift, diffusion, running_cost, kernels,
                          np.broadcast_to(np.asarray(x0, float), (n,)), mu, lam, projection,
                          meta={'form': 'sde', 'lipschitz': dict(lipschitz)})


def make_caputo_problem(alpha: float, coeffs: Dict, lam: float, mu: Optional[float] = None) -> ControlProblem:
    """Mild form of a Caputo equation of order alpha: coefficients carry the factor tau^(alpha-1)/Gamma(alpha).

    `coeffs` holds 'b' and optionally 'sigma' as (func, dx, du) triples of (s, x, u),
    'cost' (RunningCost), 'lipschitz' (b_x, b_u, sigma_x, sigma_u), 'x0', 'n', 'l'.
    """
    if not 0.5 < alpha < 1.0:
        raise ValueError(ERROR_MESSAGES['alpha_range'].format(alpha=alpha))
    L = coeffs.get('lipschitz', {})
    kernels = caputo_kernels(alpha, L.get('b_x', 1.0), L.get('b_u', 1.0), L.get('sigma_x', 1.0), L.get('sigma_u', 1.0))
    kernels = {key: (k if k.scale > 0 else Kernel.zero()) for key, k in kernels.items()}
    factor = Kernel.caputo(alpha, 1.0)
    n, l = coeffs.get('n', 1), coeffs.get('l', 1)
    drift = _factored(coeffs['b'], factor, kernels['b_x'], 'b')
    diffusion = _factored(coeffs.get('sigma'), factor, kernels['sigma_x'], 'sigma')
    mu = 0.5 * lam if mu is None else mu
    return ControlProblem(n, l, drift, diffusion, coeffs['cost'], kernels,
                          np.broadcast_to(np.asarray(coeffs.get('x0', 1.0), float), (n,)), mu, lam,
                          coeffs.get('projection', identity),
                          meta={'form': 'caputo', 'alpha': alpha, 'lipschitz': dict(L)})


def _anticipated_pair(ens: FilteredEnsemble, Y0: np.ndarray, Z0: np.ndarray, lam: float):
    """cY_i = E_i sum_{i<l<N} e^{-lam(t_l-t_i)} Y_l h and cZ_i = sum_{i<l<N} e^{-lam(t_l-t_i)} Z(t_l,t_i) h."""
    steps, h, nodes = ens.steps, ens.h, ens.nodes
    decay = math.exp(-lam * h)
    S = np.zeros_like(Y0)
    for i in range(steps - 2, -1, -1):
        S[:, i] = decay * (Y0[:, i + 1] * h + S[:, i + 1])
    cY = np.empty_like(S)
    for i in range(steps + 1):
        cY[:, i] = cond_expect(ens, S[:, i], i)
    cZ = np.zeros(Y0.shape + (Z0.shape[-1],))
    for i in range(steps - 1):
        cols = np.arange(i + 1, steps)
        cZ[:, i] = np.einsum('j,pjak->pak', np.exp(-lam * (nodes[cols] - nodes[i])) * h, Z0[:, cols, i])
    return cY, cZ


@dataclass
class SdeBsdeReport:
    hamiltonian_gap: float
    bsde_residual: float

    def to_dict(self) -> Dict:
        return {'hamiltonian_gap': self.hamiltonian_gap, 'bsde_residual': self.bsde_residual}


def sde_bsde_residual(p: ControlProblem, u, ens: FilteredEnsemble) -> SdeBsdeReport:
    """Adjoint of an SDE problem against the standard Hamiltonian: Y = d/dx [h + <b, cY> + <sigma, cZ>]."""
    u = feasible_control(p, u, ens)
    X = p.state(u, ens)
    sol = adjoint_solve(p, u, X, ens)
    ens = ens.with_state(X)
    nodes, steps = ens.nodes, ens.steps
    cY, cZ = _anticipated_pair(ens, sol.Y, sol.Z, p.lam)
    grad = p.running_cost.dx(nodes, X, u) + np.einsum('pjab,pja->pjb', p.drift.dx(nodes, X, u), cY)
    if p.diffusion is not None:
        grad = grad + np.einsum('pjakb,pjak->pjb', p.diffusion.dx(nodes, X, u), cZ)
    gap = float(np.max(np.abs(sol.Y[:, :steps] - grad[:, :steps]), initial=0.0))
    reduction = bsvie_to_bsde(sol, p.lam, p.mu, ens)
    return SdeBsdeReport(gap, reduction.residual_norm)


# ---------------------------------------------------------------------------
# Integro-differential lift
# ---------------------------------------------------------------------------

@dataclass
class DelayTerm:
    """A_k(t, s) of shape (rows, cols) with |A_k(t, s)| <= kernel(t - s)."""

    matrix: Union[np.ndarray, Callable]
    kernel: Kernel
    rows: int

    def at(self, t: np.ndarray, s: np.ndarray, cols: int) -> np.ndarray:
        return matrix_at(self.matrix, t, s, (self.rows, cols))


@dataclass
class IntegroSpec:
    """dX = b(t, X, int A1 X, int A2 u, u) dt + sigma(t, X, int A3 X, int A4 u, u) dW.

    `b(s, x, y1, y2, u)` returns (P, J, n) and `b_partials` maps 'x', 'y1', 'y2', 'u'
    to Jacobians (P, J, n, .); `sigma(s, x, y3, y4, u)` returns (P, J, n, d) with
    `sigma_partials` over 'x', 'y3', 'y4', 'u' of shape (P, J, n, d, .).
    """

    n: int
    l: int
    b: Callable
    b_partials: Dict[str, Callable]
    running_cost: RunningCost
    sigma: Optional[Callable] = None
    sigma_partials: Dict[str, Callable] = field(default_factory=dict)
    delays: Dict[int, DelayTerm] = field(default_factory=dict)
    lipschitz: Dict[str, float] = field(default_factory=dict)
    x0: Union[float, np.ndarray] = 1.0
    mu: float = 0.5
    lam: float = 1.0
    d: int = 1
    projection: Callable = identity

    def rows(self, k: int) -> int:
        return self.delays[k].rows if k in self.delays else 0

    def offsets(self) -> List[int]:
        out = [0, self.n]
        for k in (1, 2, 3, 4):
            out.append(out[-1] + self.rows(k))
        return out

    def kernel(self, k: int) -> Kernel:
        return self.delays[k].kernel if k in self.delays else Kernel.zero()


def integro_domain(spec: IntegroSpec) -> Callable[[float, float], DomainReport]:
    L = spec.lipschitz
    drift_l = L.get('b_x', 0.0) + L.get('b_y1', 0.0) + L.get('b_y2', 0.0)
    diff_l = L.get('sigma_x', 0.0) + L.get('sigma_y3', 0.0) + L.get('sigma_y4', 0.0)

    def rate(rho: float) -> float:
        if rho <= 0:
            return math.inf
        return (drift_l / rho + diff_l / math.sqrt(2.0 * rho)
                + weighted_norm(spec.kernel(1), 1, rho) + weighted_norm(spec.kernel(3), 1, rho))

    def domain(mu: float, lam: float) -> DomainReport:
        failed = []
        if not mu > 0:
            failed.append('mu_positive')
        delay_mass = (weighted_norm(spec.kernel(2), 1, mu) + weighted_norm(spec.kernel(4), 1, mu)
                      if mu > 0 else math.inf)
        if not math.isfinite(delay_mass):
            failed.append('delay_kernels_finite')
        value = rate(mu)
        if not value < 1.0:
            failed.append('contraction')
        if not lam >= 2.0 * mu:
            failed.append('discount')
        root = invert_rate(rate) if drift_l + diff_l > 0 or not spec.kernel(1).is_zero or not spec.kernel(3).is_zero else 0.0
        margin = 1.0 - value
        if failed:
            logger.warning(f"Integro-differential problem inadmissible at mu={mu}, lambda={lam}: failed {failed}")
        return DomainReport(
            kind='control',
            rho_star=root if root is not None else math.inf,
            weight=(mu, lam),
            margin=margin,
            contraction_constant=1.0 / margin if margin > 0 else math.inf,
            admissible=not failed,
            failed_clauses=failed,
            details={'rate': value, 'delay_mass': delay_mass},
            kernels={f"A{k}": spec.kernel(k) for k in (1, 2, 3, 4)},
        )

    return domain


def integro_lift(spec: IntegroSpec) -> ControlProblem:
    """Augmented state (X, int A1 X, int A2 u, int A3 X, int A4 u) as a controlled SVIE."""
    n, l, d = spec.n, spec.l, spec.d
    o = spec.offsets()
    total = o[-1]

    def split(X):
        return [X[..., o[k]:o[k + 1]] for k in range(5)]

    def delay(k, t, s, arg):
        if k not in spec.delays:
            return np.zeros(arg.shape[:2] + (0,))
        return np.einsum('jab,pjb->pja', spec.delays[k].at(t, s, arg.shape[-1]), arg)

    def delay_block(k, t, s, P, cols):
        return spec.delays[k].at(t, s, cols)[None].repeat(P, axis=0)

    def drift(t, s, X, u):
        x, y1, y2, y3, y4 = split(X)
        out = np.zeros(X.shape[:2] + (total,))
        out[..., :n] = spec.b(s, x, y1, y2, u)
        out[..., o[1]:o[2]] = delay(1, t, s, x)
        out[..., o[2]:o[3]] = delay(2, t, s, u)
        out[..., o[3]:o[4]] = delay(3, t, s, x)
        out[..., o[4]:o[5]] = delay(4, t, s, u)
        return out

    def drift_dx(t, s, X, u):
        x, y1, y2, _, _ = split(X)
        P, J = X.shape[:2]
        out = np.zeros((P, J, total, total))
        for key, (lo, hi) in (('x', (0, n)), ('y1', (o[1], o[2])), ('y2', (o[2], o[3]))):
            if hi > lo:
                out[:, :, :n, lo:hi] = spec.b_partials[key](s, x, y1, y2, u)
        if 1 in spec.delays:
            out[:, :, o[1]:o[2], :n] = delay_block(1, t, s, P, n)
        if 3 in spec.delays:
            out[:, :, o[3]:o[4], :n] = delay_block(3, t, s, P, n)
        return out

    def drift_du(t, s, X, u):
        x, y1, y2, _, _ = split(X)
        P, J = X.shape[:2]
        out = np.zeros((P, J, total, l))
        out[:, :, :n] = spec.b_partials['u'](s, x, y1, y2, u)
        if 2 in spec.delays:
            out[:, :, o[2]:o[3]] = delay_block(2, t, s, P, l)
        if 4 in spec.delays:
            out[:, :, o[4]:o[5]] = delay_block(4, t, s, P, l)
        return out

    def diffusion(t, s, X, u):
        x, _, _, y3, y4 = split(X)
        out = np.zeros(X.shape[:2] + (total, d))
        out[:, :, :n] = spec.sigma(s, x, y3, y4, u)
        return out

    def diffusion_dx(t, s, X, u):
        x, _, _, y3, y4 = split(X)
        out = np.zeros(X.shape[:2] + (total, d, total))
        for key, (lo, hi) in (('x', (0, n)), ('y3', (o[3], o[4])), ('y4', (o[4], o[5]))):
            if hi > lo:
                out[:, :, :n, :, lo:hi] = spec.sigma_partials[key](s, x, y3, y4, u)
        return out

    def diffusion_du(t, s, X, u):
        x, _, _, y3, y4 = split(X)
        out = np.zeros(X.shape[:2] + (total, d, l))
        out[:, :, :n] = spec.sigma_partials['u'](s, x, y3, y4, u)
        return out

    L = spec.lipschitz
    # the A1 and A3 rows of the lifted Jacobian enter the adjoint driver through b_x
    delay_sup = spec.kernel(1).sup + spec.kernel(3).sup
    if not math.isfinite(delay_sup):
        raise ValueError(ERROR_MESSAGES['unbounded_delay'].format(k1=spec.kernel(1), k3=spec.kernel(3)))
    kernels = {
        'b_x': _envelope(L.get('b_x', 0.0) + L.get('b_y1', 0.0) + L.get('b_y2', 0.0) + delay_sup, None),
        'b_u': _envelope(L.get('b_u', 0.0), None),
        'sigma_x': _envelope(L.get('sigma_x', 0.0) + L.get('sigma_y3', 0.0) + L.get('sigma_y4', 0.0), None),
        'sigma_u': _envelope(L.get('sigma_u', 0.0), None),
    }
    base = spec.running_cost

    def lifted_cost(t, X, u):
        return base.func(t, X[..., :n], u)

    def lifted_cost_dx(t, X, u):
        out = np.zeros(X.shape)
        out[..., :n] = base.dx(t, X[..., :n], u)
        return out

    def lifted_cost_du(t, X, u):
        return base.du(t, X[..., :n], u)

    x0 = np.zeros(total)
    x0[:n] = np.broadcast_to(np.asarray(spec.x0, dtype=float), (n,))
    sigma_coef = None
    if spec.sigma is not None:
        sigma_coef = Coefficient(diffusion, kernels['sigma_x'], None, diffusion_dx, diffusion_du, 'sigma-lift')
    return ControlProblem(
        total, l,
        Coefficient(drift, kernels['b_x'], None, drift_dx, drift_du, 'b-lift'),
        sigma_coef,
        RunningCost(lifted_cost, lifted_cost_dx, lifted_cost_du, base.growth, name=f"{base.name}-lift"),
        kernels, x0, spec.mu, spec.lam, spec.projection,
        domain_override=integro_domain(spec),
        meta={'form': 'integro', 'spec': spec, 'offsets': o},
    )


def _integro_parts(p: ControlProblem, u, ens: FilteredEnsemble):
    spec: IntegroSpec = p.meta['spec']
    u = feasible_control(p, u, ens)
    X = p.state(u, ens)
    sol = adjoint_solve(p, u, X, ens)
    ens = ens.with_state(X)
    o = p.meta['offsets']
    n = spec.n
    cY, cZ = _anticipated_pair(ens, sol.Y[..., :n], sol.Z[..., :n, :], p.lam)
    blocks = [X[..., o[k]:o[k + 1]] for k in range(5)]
    return spec, ens, u, X, sol, cY, cZ, blocks


def _transpose_apply(jac: np.ndarray, vec: np.ndarray, diffusion: bool) -> np.ndarray:
    if diffusion:
        return np.einsum('pjakc,pjak->pjc', jac, vec)
    return np.einsum('pjac,pja->pjc', jac, vec)


def _delayed_sum(ens: FilteredEnsemble, spec: IntegroSpec, k: int, values: np.ndarray, lam: float,
                 cols: int) -> np.ndarray:
    """E_j sum_{j<i<N} e^{-lam(t_i-t_j)} A_k(t_i, t_j)^T values_i h for every row j."""
    steps, h, nodes = ens.steps, ens.h, ens.nodes
    out = np.zeros(values.shape[:2] + (cols,))
    if k not in spec.delays:
        return out
    for j in range(steps - 1):
        idx = np.arange(j + 1, steps)
        A = spec.delays[k].at(nodes[idx], np.full(idx.size, nodes[j]), cols)
        weights = np.exp(-lam * (nodes[idx] - nodes[j])) * h
        out[:, j] = cond_expect(ens, np.einsum('i,iac,pia->pc', weights, A, values[:, idx]), j)
    return out


def expanded_integro_condition(p: ControlProblem, u, ens: FilteredEnsemble) -> np.ndarray:
    """h_u + b_u^T cY + sigma_u^T cZ + E_t sum e^{-lam(s-t)} [A2(s,t)^T b_y2(s)^T cY(s) + A4(s,t)^T sigma_y4(s)^T cZ(s)] h."""
    spec, ens, u, X, sol, cY, cZ, (x, y1, y2, y3, y4) = _integro_parts(p, u, ens)
    nodes, steps, l = ens.nodes, ens.steps, spec.l
    out = np.zeros_like(u)
    out[:, :steps] = spec.running_cost.du(nodes[:steps], x[:, :steps], u[:, :steps])
    out += _transpose_apply(spec.b_partials['u'](nodes, x, y1, y2, u), cY, False)
    if spec.sigma is not None:
        out += _transpose_apply(spec.sigma_partials['u'](nodes, x, y3, y4, u), cZ, True)
    if 2 in spec.delays:
        inner = _transpose_apply(spec.b_partials['y2'](nodes, x, y1, y2, u), cY, False)
        out += _delayed_sum(ens, spec, 2, inner, p.lam, l)
    if 4 in spec.delays and spec.sigma is not None:
        inner = _transpose_apply(spec.sigma_partials['y4'](nodes, x, y3, y4, u), cZ, True)
        out += _delayed_sum(ens, spec, 4, inner, p.lam, l)
    out[:, steps] = 0.0
    return out


@dataclass
class AnticipatedReport:
    generator_gap: float
    residual: np.ndarray
    residual_norm: float

    def to_dict(self) -> Dict:
        return {'generator_gap': self.generator_gap, 'residual_norm': self.residual_norm}


def verify_anticipated_bsde(p: ControlProblem, u, ens: FilteredEnsemble) -> AnticipatedReport:
    """Anticipated BSDE dcY = -(F(t) - lam cY) dt + cZ dW with F built from cY, cZ and their delayed values."""
    spec, ens, u, X, sol, cY, cZ, (x, y1, y2, y3, y4) = _integro_parts(p, u, ens)
    nodes, steps, n, h = ens.nodes, ens.steps, spec.n, ens.h
    F = spec.running_cost.dx(nodes, x, u)
    F = F + _transpose_apply(spec.b_partials['x'](nodes, x, y1, y2, u), cY, False)
    if spec.sigma is not None:
        F = F + _transpose_apply(spec.sigma_partials['x'](nodes, x, y3, y4, u), cZ, True)
    if 1 in spec.delays:
        F = F + _delayed_sum(ens, spec, 1, _transpose_apply(spec.b_partials['y1'](nodes, x, y1, y2, u), cY, False),
                             p.lam, n)
    if 3 in spec.delays and spec.sigma is not None:
        F = F + _delayed_sum(ens, spec, 3,
                             _transpose_apply(spec.sigma_partials['y3'](nodes, x, y3, y4, u), cZ, True), p.lam, n)
    gap = float(np.max(np.abs(sol.Y[:, :steps, :n] - F[:, :steps]), initial=0.0))
    residual = (cY[:, 1:] - cY[:, :steps] + (F[:, :steps] - p.lam * cY[:, :steps]) * h
                - np.einsum('pimk,pik->pim', cZ[:, :steps], ens.dW))
    padded = np.concatenate([residual, np.zeros_like(residual[:, :1])], axis=1)
    return AnticipatedReport(gap, residual, weighted_sq_norm(ens, padded, -p.mu)[1])
