"""
Linear Volterra Theory - Fundamental Solution, Resolvent and Duality
Variation-of-constants representation of linear BSVIEs, the forward/backward duality pairing and the reduction of BSVIEs to BSDEs.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from solvers.bsvie_solver import BsvieProblem, Driver, MSolution, SolverOptions, represent, solve_bsvie
from solvers.exceptions import InadmissibleError
from solvers.kernel_calculus import Kernel, critical_weight, weighted_norm
from solvers.solver_config import ERROR_MESSAGES, MAX_SERIES_TERMS, SERIES_TOL
from solvers.stochastic_core import (
    AdaptedProcess,
    FilteredEnsemble,
    TwoParameterProcess,
    cond_expect,
    weighted_sq_norm,
    weighted_sq_norm_two,
)
from solvers.svie_forward import SvieProblem, linear_diffusion, linear_drift, solve_svie

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, Callable]


def matrix_at(matrix: Matrix, t: np.ndarray, s: np.ndarray, tail: tuple) -> np.ndarray:
    """Coefficient values on aligned time arrays, shape (J,) + tail."""
    if callable(matrix):
        return np.asarray(matrix(t, s), dtype=float).reshape((t.shape[0],) + tail)
    return np.broadcast_to(np.asarray(matrix, dtype=float).reshape(tail), (t.shape[0],) + tail)


@dataclass
class LinearBsvieSpec:
    """Y(t) = psi(t) + int_t^T e^{-lam(s-t)} {A(t,s) Y(s) + sum_k B_k(t,s) Z_k(t,s)} ds - int Z dW."""

    m: int
    A: Matrix
    B: Optional[Matrix] = None
    K_A: Kernel = field(default_factory=Kernel.zero)
    K_B: Kernel = field(default_factory=Kernel.zero)
    lam: float = 1.0
    eta: float = 0.0
    d: int = 1

    def a_at(self, t, s) -> np.ndarray:
        return matrix_at(self.A, t, s, (self.m, self.m))

    def b_at(self, t, s) -> np.ndarray:
        if self.B is None:
            return np.zeros((t.shape[0], self.d, self.m, self.m))
        return matrix_at(self.B, t, s, (self.d, self.m, self.m))

    def margin(self) -> float:
        return 1.0 - weighted_norm(self.K_A, 1, self.eta + self.lam) - weighted_norm(self.K_B, 2, self.lam)

    def series_ratio(self) -> float:
        b_norm = weighted_norm(self.K_B, 2, self.lam)
        if b_norm >= 1.0:
            return math.inf
        return weighted_norm(self.K_A, 1, self.eta + self.lam) / (1.0 - b_norm)

    def driver(self) -> Driver:
        """Type-I linear driver g = A(t,s) y + sum_k B_k(t,s) z1^k."""
        def g(t, s, y, z1, z2):
            tt = np.full(s.shape[0], t)
            out = np.einsum('jab,pjb->pja', self.a_at(tt, s), y)
            if self.B is not None:
                out = out + np.einsum('jkab,pjbk->pja', self.b_at(tt, s), z1)
            return out
        return Driver(g, g_y=self.K_A, g_z1=self.K_B, name='linear-type-I')

    def problem(self, psi) -> BsvieProblem:
        return BsvieProblem(self.m, psi, self.driver(), self.lam, self.eta)


@dataclass
class LinearSvieSpec:
    """X(t) = phi(t) + int_0^t C(t,s) X(s) ds + sum_k int_0^t D_k(t,s) X(s) dW_k(s)."""

    n: int
    C: Matrix
    D: Optional[Matrix] = None
    K_C: Kernel = field(default_factory=Kernel.zero)
    K_D: Kernel = field(default_factory=Kernel.zero)
    d: int = 1

    def c_at(self, t, s) -> np.ndarray:
        return matrix_at(self.C, t, s, (self.n, self.n))

    def d_at(self, t, s) -> np.ndarray:
        if self.D is None:
            return np.zeros((t.shape[0], self.d, self.n, self.n))
        return matrix_at(self.D, t, s, (self.d, self.n, self.n))

    def forward_problem(self, phi, mu: float) -> SvieProblem:
        drift = linear_drift(lambda t, s: self.c_at(t, s), envelope=self.K_C, name='C')
        diffusion = None
        if self.D is not None:
            diffusion = linear_diffusion(lambda t, s: self.d_at(t, s).transpose(0, 2, 1, 3),
                                         envelope=self.K_D, name='D')
        return SvieProblem(self.n, phi, drift, diffusion, mu=mu)

    def adjoint_driver(self) -> Driver:
        """Type-II driver g = C(s,t)^T y + sum_k D_k(s,t)^T z2^k."""
        def g(t, s, y, z1, z2):
            tt = np.full(s.shape[0], t)
            out = np.einsum('jba,pjb->pja', self.c_at(s, tt), y)
            if self.D is not None:
                out = out + np.einsum('jkba,pjbk->pja', self.d_at(s, tt), z2)
            return out
        return Driver(g, g_y=self.K_C, g_z2=self.K_D, name='adjoint-type-II')


# ---------------------------------------------------------------------------
# Fundamental solution and resolvent
# ---------------------------------------------------------------------------

def fundamental_phi(spec: LinearBsvieSpec, ens: FilteredEnsemble) -> TwoParameterProcess:
    """Euler recursion Phi(t_i, s_{j+1}) = Phi(t_i, s_j)(I + sum_k e^{-lam(s_j - t_i)} B_k(t_i, s_j) dW_k)."""
    n, m = ens.steps, spec.m
    ens.check_memory((ens.paths, n + 1, n + 1, m, m))
    nodes = ens.nodes
    Phi = np.zeros((ens.paths, n + 1, n + 1, m, m))
    eye = np.eye(m)
    for j in range(n + 1):
        Phi[:, j, j] = eye
        if j == n:
            break
        rows = np.arange(j + 1)
        t = nodes[rows]
        s = np.full(j + 1, nodes[j])
        disc = np.exp(-spec.lam * (s - t))
        B = spec.b_at(t, s)
        noise = np.einsum('i,ikab,pk->piab', disc, B, ens.dW[:, j])
        Phi[:, :j + 1, j + 1] = Phi[:, :j + 1, j] + np.einsum('piab,pibc->piac', Phi[:, :j + 1, j], noise)
    return TwoParameterProcess(Phi, ens.grid, name='Phi')


def phi_moment_bound(spec: LinearBsvieSpec, Phi: TwoParameterProcess, ens: FilteredEnsemble):
    """(max_{i<=j} E[|Phi(t_i,s_j)|_op^2]^{1/2}, (1 - [K_B]_2(lam))^{-1})."""
    ops = np.linalg.norm(Phi.values, ord=2, axis=(-2, -1))
    moments = np.sqrt(ens.expect(ops ** 2))
    mask = np.triu(np.ones_like(moments, dtype=bool))
    b_norm = weighted_norm(spec.K_B, 2, spec.lam)
    bound = 1.0 / (1.0 - b_norm) if b_norm < 1.0 else math.inf
    return float(moments[mask].max()), bound


def _compose(Xi_k: np.ndarray, Xi_1: np.ndarray, h: float) -> np.ndarray:
    """(Xi_k * Xi_1)(t_i, s_j) = sum_{l=i}^{j-1} Xi_k(t_i, r_l) Xi_1(r_l, s_j) h."""
    nodes = Xi_k.shape[1]
    out = np.zeros_like(Xi_k)
    for i in range(nodes):
        left = Xi_k[:, i, i:]
        right = Xi_1[:, i:, :]
        mask = (np.arange(i, nodes)[:, None] < np.arange(nodes)[None, :]).astype(float)
        out[:, i] = np.einsum('plab,lj,pljbc->pjac', left, mask, right) * h
    return out


def _discounted_norm(ens: FilteredEnsemble, values: np.ndarray, lam: float, eta: float) -> float:
    nodes = ens.nodes
    disc = np.exp(-lam * np.clip(nodes[None, :] - nodes[:, None], 0.0, None))
    return weighted_sq_norm_two(ens, values[:, :, :ens.steps] * disc[None, :, :ens.steps, None, None], eta)[1]


@dataclass
class ResolventResult:
    R: TwoParameterProcess
    Xi1: np.ndarray
    term_norms: List[float]

    @property
    def measured_ratios(self) -> List[float]:
        norms = self.term_norms
        return [norms[k + 1] / norms[k] for k in range(len(norms) - 1) if norms[k] > 0]


def resolvent(spec: LinearBsvieSpec, Phi: TwoParameterProcess, ens: FilteredEnsemble,
              series_tol: float = SERIES_TOL) -> ResolventResult:
    """R = sum_k Xi_k with Xi_1 = Phi A, truncated once a term falls below series_tol * ||Xi_1||."""
    ratio = spec.series_ratio()
    if ratio >= 1.0:
        raise InadmissibleError(ERROR_MESSAGES['series_ratio'].format(ratio=ratio), margin=1.0 - ratio,
                                clause='series_ratio')
    n = ens.steps
    nodes = ens.nodes
    Xi1 = np.zeros_like(Phi.values)
    for i in range(n + 1):
        t = np.full(n + 1 - i, nodes[i])
        Xi1[:, i, i:] = np.einsum('pjab,jbc->pjac', Phi.values[:, i, i:], spec.a_at(t, nodes[i:]))
    base = _discounted_norm(ens, Xi1, spec.lam, spec.eta)
    R = Xi1.copy()
    norms = [base]
    term = Xi1
    for _ in range(MAX_SERIES_TERMS):
        if base == 0.0:
            break
        term = _compose(term, Xi1, ens.h)
        size = _discounted_norm(ens, term, spec.lam, spec.eta)
        norms.append(size)
        R += term
        if size < series_tol * base:
            break
    logger.debug(f"Resolvent series: {len(norms)} term(s), theoretical ratio {ratio:.4f}")
    return ResolventResult(TwoParameterProcess(R, ens.grid, name='R'), Xi1, norms)


def resolvent_identity_residual(res: ResolventResult, ens: FilteredEnsemble, lam: float, eta: float) -> float:
    """Discounted norm of R - Xi_1 - R * Xi_1."""
    gap = res.R.values - res.Xi1 - _compose(res.R.values, res.Xi1, ens.h)
    return _discounted_norm(ens, gap, lam, eta)


# ---------------------------------------------------------------------------
# Variation of constants
# ---------------------------------------------------------------------------

@dataclass
class VocResult:
    Y: AdaptedProcess
    Z: TwoParameterProcess
    gap: float
    reference: Optional[MSolution] = None
    z_gap: float = math.nan

    def to_dict(self) -> Dict:
        return {'gap': self.gap, 'z_gap': self.z_gap, 'z_derived': self.Z.derived}


def equation_z(problem: BsvieProblem, Y: np.ndarray, ens: FilteredEnsemble) -> np.ndarray:
    """Z of the equation with Y held fixed.

    Driver sums are accumulated backward in s, one column at a time, so every
    Z(t_i, s_j) with s_j >= t_i only needs columns to its right. The sums give
    xi_i and Z follows from `represent`.
    """
    psi = problem.free_term(ens)
    drive = np.zeros_like(psi)
    if problem.driver is None:
        return represent(ens, psi, Y)
    n, h, nodes = ens.steps, ens.h, ens.nodes
    n_cut = problem.cutoff(ens)
    mult = problem.driver.multipliers(h, n)
    first = 0 if problem.diagonal else 1
    no_z2 = np.zeros((ens.paths, 1, problem.m, ens.dim))
    U = psi.copy()
    for j in range(n - 1, -1, -1):
        dw = ens.dW[:, j, :][:, None, None, :]
        Zj = cond_expect(ens, U[:, :j + 1, :, None] * dw, j) / h
        U[:, :j + 1] = cond_expect(ens, U[:, :j + 1], j)
        if j >= n_cut:
            continue
        for i in range(j - first + 1):
            weight = math.exp(-problem.lam * (nodes[j] - nodes[i])) * mult[j - i] * h
            value = problem.driver.func(nodes[i], nodes[j:j + 1], Y[:, j:j + 1], Zj[:, i:i + 1], no_z2)
            U[:, i] += weight * value[:, 0]
            drive[:, i] += weight * value[:, 0]
    return represent(ens, psi + drive, Y)


def variation_of_constants(spec: LinearBsvieSpec, psi, ens: FilteredEnsemble,
                           compare: bool = True, opts: Optional[SolverOptions] = None) -> VocResult:
    """Y(t_i) = E_i[Phi(t_i,T) psi_i + sum_{j>=i} e^{-lam(s_j-t_i)} R(t_i,s_j) Phi(s_j,T) psi_j h]."""
    problem = spec.problem(psi)
    psi_arr = problem.free_term(ens)
    Phi = fundamental_phi(spec, ens)
    R = resolvent(spec, Phi, ens).R.values
    n, nodes = ens.steps, ens.nodes
    terminal = np.einsum('pjab,pjb->pja', Phi.values[:, :, n], psi_arr)
    xi = terminal.copy()
    for i in range(n):
        cols = np.arange(i, n)
        disc = np.exp(-spec.lam * (nodes[cols] - nodes[i])) * ens.h
        xi[:, i] += np.einsum('j,pjab,pjb->pa', disc, R[:, i, cols], terminal[:, cols])
    Y = np.empty_like(xi)
    for i in range(n + 1):
        Y[:, i] = cond_expect(ens, xi[:, i], i)
    Z = TwoParameterProcess(equation_z(problem, Y, ens), ens.grid, name='Z', derived=True)
    gap, z_gap, reference = math.nan, math.nan, None
    if compare:
        reference = solve_bsvie(problem, ens, opts)
        gap = weighted_sq_norm(ens, Y - reference.Y, spec.eta)[1]
        z_gap = weighted_sq_norm_two(ens, Z.values - reference.Z, spec.eta)[1]
        logger.info(f"Variation of constants vs fixed point: gap {gap:.3e}, Z gap {z_gap:.3e}")
    return VocResult(AdaptedProcess(Y, ens.grid, name='Y'), Z, gap, reference, z_gap)


# ---------------------------------------------------------------------------
# Duality
# ---------------------------------------------------------------------------

@dataclass
class DualityReport:
    lhs: float
    rhs: float
    gap: float
    forward: Optional[AdaptedProcess] = None
    backward: Optional[MSolution] = None

    def to_dict(self) -> Dict:
        return {'lhs': self.lhs, 'rhs': self.rhs, 'gap': self.gap}


def discounted_pairing(ens: FilteredEnsemble, a: np.ndarray, b: np.ndarray, lam: float) -> float:
    n = ens.steps
    inner = np.einsum('pia,pia->pi', a[:, :n], b[:, :n])
    return float(np.sum(ens.expect(inner) * np.exp(-lam * ens.nodes[:n])) * ens.h)


def duality_check(fwd: LinearSvieSpec, phi, psi, mu: float, eta: float, lam: float,
                  ens: FilteredEnsemble, diagonal: bool = True,
                  opts: Optional[SolverOptions] = None) -> DualityReport:
    """E sum e^{-lam t}<psi, X> h against E sum e^{-lam t}<Y, phi> h for the transposed backward equation."""
    rho = critical_weight(fwd.K_C, fwd.K_D)
    if not (eta + lam >= mu > rho):
        raise InadmissibleError(
            ERROR_MESSAGES['duality_hypothesis'].format(eta=eta, lam=lam, mu=mu, rho=rho),
            margin=mu - rho, clause='duality_hypothesis')
    X = solve_svie(fwd.forward_problem(phi, mu), ens)
    backward = BsvieProblem(fwd.n, psi, fwd.adjoint_driver(), lam, eta, diagonal=diagonal)
    sol = solve_bsvie(backward, ens, opts)
    phi_arr = fwd.forward_problem(phi, mu).free_term(ens)
    psi_arr = backward.free_term(ens)
    lhs = discounted_pairing(ens, psi_arr, X.values, lam)
    rhs = discounted_pairing(ens, sol.Y, phi_arr, lam)
    return DualityReport(lhs, rhs, abs(lhs - rhs), X, sol)


# ---------------------------------------------------------------------------
# Reduction to a BSDE
# ---------------------------------------------------------------------------

@dataclass
class BsdeReduction:
    cY: AdaptedProcess
    cZ: AdaptedProcess
    residual: np.ndarray
    residual_norm: float

    def to_dict(self) -> Dict:
        return {'residual_norm': self.residual_norm}


def bsvie_to_bsde(sol: MSolution, lam: float, mu: float, ens: FilteredEnsemble,
                  include_diagonal: bool = False) -> BsdeReduction:
    """cY(t) = E_t sum_{s>=t} e^{-lam(s-t)} Y(s) h and cZ(t) = sum_{s>t} e^{-lam(s-t)} Z(s,t) h."""
    if not (lam >= 2.0 * mu > 0.0):
        raise InadmissibleError(ERROR_MESSAGES['bsde_hypothesis'].format(lam=lam, mu=mu),
                                margin=lam - 2.0 * mu, clause='bsde_hypothesis')
    n, h, nodes = ens.steps, ens.h, ens.nodes
    Y, Z = sol.Y, sol.Z
    decay = math.exp(-lam * h)
    S = np.zeros_like(Y)
    for i in range(n - 1, -1, -1):
        S[:, i] = Y[:, i] * h + decay * S[:, i + 1]
    cY = np.empty_like(Y)
    for i in range(n + 1):
        cY[:, i] = cond_expect(ens, S[:, i], i)
    cZ = np.zeros(Y.shape + (ens.dim,))
    for i in range(n):
        first = i if include_diagonal else i + 1
        cols = np.arange(first, n)
        if cols.size:
            disc = np.exp(-lam * (nodes[cols] - nodes[i])) * h
            cZ[:, i] = np.einsum('j,pjmd->pmd', disc, Z[:, cols, i])
    residual = (cY[:, :n] - cY[:, 1:] - (Y[:, :n] - lam * cY[:, :n]) * h
                + np.einsum('pimd,pid->pim', cZ[:, :n], ens.dW))
    padded = np.concatenate([residual, np.zeros_like(residual[:, :1])], axis=1)
    norm = weighted_sq_norm(ens, padded, -mu)[1]
    flat_z = cZ.reshape(cZ.shape[:2] + (-1,))
    return BsdeReduction(AdaptedProcess(cY, ens.grid, name='cY'), AdaptedProcess(flat_z, ens.grid, name='cZ'),
                         residual, norm)
