"""
Forward SVIE Solver - Product Integration Time Stepping
Solves X(t) = phi(t) + int_0^t b(t,s,X,u) ds + int_0^t sigma(t,s,X,u) dW(s) on a filtered ensemble.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from solvers.exceptions import InadmissibleError, NonFiniteError
from solvers.kernel_calculus import DomainReport, Kernel, svie_domain
from solvers.solver_config import ERROR_MESSAGES, SPOT_CHECK_SAMPLES, SPOT_CHECK_SLACK, STABILITY_TOL_FACTOR
from solvers.stochastic_core import AdaptedProcess, FilteredEnsemble, weighted_sq_norm

logger = logging.getLogger(__name__)


@dataclass
class Coefficient:
    """Drift or diffusion callback tagged with its Lipschitz envelope.

    Callbacks are vectorized along axis 1: t and s are 1-D arrays aligned with
    x of shape (P, J, n) and u of shape (P, J, l). A drift returns (P, J, n), a
    diffusion (P, J, n, d). With `factor` set the coefficient is
    factor(t - s) * func(s, x, u) and cell integrals of the factor replace h * K.
    """

    func: Callable
    envelope: Kernel = field(default_factory=Kernel.zero)
    factor: Optional[Kernel] = None
    dx: Optional[Callable] = None
    du: Optional[Callable] = None
    name: str = 'b'
    _multipliers: Dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def factored(self) -> bool:
        return self.factor is not None

    def multipliers(self, h: float, steps: int) -> np.ndarray:
        """m[l] = (1/h) int_{(l-1)h}^{lh} factor, with m[0] = 0 since the diagonal is never sampled."""
        key = (h, steps)
        if key not in self._multipliers:
            m = np.zeros(steps + 1)
            m[1:] = self.factor.cell_integrals(h, steps) / h
            self._multipliers[key] = m
        return self._multipliers[key]

    def _call(self, fn: Callable, h: float, steps: int, t, s, x, u) -> np.ndarray:
        J = x.shape[1]
        t = np.broadcast_to(np.asarray(t, dtype=float), (J,))
        s = np.broadcast_to(np.asarray(s, dtype=float), (J,))
        if not self.factored:
            return fn(t, s, x, u)
        out = fn(s, x, u)
        lag = np.clip(np.rint((t - s) / h).astype(int), 0, steps)
        mult = self.multipliers(h, steps)[lag]
        return out * mult.reshape((1, J) + (1,) * (out.ndim - 2))

    def value(self, h: float, steps: int, t, s, x, u) -> np.ndarray:
        return self._call(self.func, h, steps, t, s, x, u)

    def jac_x(self, h: float, steps: int, t, s, x, u) -> np.ndarray:
        if self.dx is None:
            raise ValueError(f"Coefficient '{self.name}' has no state derivative")
        return self._call(self.dx, h, steps, t, s, x, u)

    def jac_u(self, h: float, steps: int, t, s, x, u) -> np.ndarray:
        if self.du is None:
            raise ValueError(f"Coefficient '{self.name}' has no control derivative")
        return self._call(self.du, h, steps, t, s, x, u)


def _matrix_term(matrix, t, s, arg, pattern_const: str, pattern_time: str):
    if callable(matrix):
        return np.einsum(pattern_time, matrix(t, s), arg)
    return np.einsum(pattern_const, np.asarray(matrix, dtype=float), arg)


def _broadcast_matrix(matrix, t, s, lead: Tuple[int, int]):
    values = matrix(t, s) if callable(matrix) else np.asarray(matrix, dtype=float)
    if callable(matrix):
        return np.broadcast_to(values[None], lead + values.shape[1:]).copy()
    return np.broadcast_to(values, lead + values.shape).copy()


def linear_drift(A, B=None, offset=None, factor: Optional[Kernel] = None,
                 envelope: Optional[Kernel] = None, name: str = 'b') -> Coefficient:
    """b(t,s,x,u) = A x + B u + offset, with A, B constant or callables of (t, s) returning (J, ., .)."""
    if factor is not None and (callable(A) or callable(B)):
        raise ValueError("Factored linear coefficients take constant matrices")

    def core(t, s, x, u):
        out = _matrix_term(A, t, s, x, 'ab,pjb->pja', 'jab,pjb->pja')
        if B is not None and u.shape[-1]:
            out = out + _matrix_term(B, t, s, u, 'ac,pjc->pja', 'jac,pjc->pja')
        if offset is not None:
            out = out + np.asarray(offset, dtype=float)
        return out

    def dx(t, s, x, u):
        return _broadcast_matrix(A, t, s, x.shape[:2])

    def du(t, s, x, u):
        if B is None:
            return np.zeros(x.shape + (u.shape[-1],))
        return _broadcast_matrix(B, t, s, x.shape[:2])

    if envelope is None:
        if callable(A):
            raise ValueError("Time-dependent coefficients need an explicit envelope kernel")
        norm = float(np.linalg.norm(np.asarray(A, dtype=float), 2))
        envelope = factor.scaled(norm) if factor is not None else Kernel.constant(norm)
    if factor is not None:
        return Coefficient(lambda s, x, u: core(None, s, x, u), envelope, factor,
                           lambda s, x, u: dx(None, s, x, u), lambda s, x, u: du(None, s, x, u), name)
    return Coefficient(core, envelope, None, dx, du, name)


def linear_diffusion(D, E=None, offset=None, factor: Optional[Kernel] = None,
                     envelope: Optional[Kernel] = None, name: str = 'sigma') -> Coefficient:
    """sigma(t,s,x,u)[a,k] = sum_b D[a,k,b] x_b + sum_c E[a,k,c] u_c + offset[a,k]."""
    if factor is not None and (callable(D) or callable(E)):
        raise ValueError("Factored linear coefficients take constant matrices")

    def core(t, s, x, u):
        out = _matrix_term(D, t, s, x, 'akb,pjb->pjak', 'jakb,pjb->pjak')
        if E is not None and u.shape[-1]:
            out = out + _matrix_term(E, t, s, u, 'akc,pjc->pjak', 'jakc,pjc->pjak')
        if offset is not None:
            out = out + np.asarray(offset, dtype=float)
        return out

    def dx(t, s, x, u):
        return _broadcast_matrix(D, t, s, x.shape[:2])

    def du(t, s, x, u):
        if E is None:
            d = (D(t, s).shape[2] if callable(D) else np.asarray(D).shape[1])
            return np.zeros(x.shape + (d, u.shape[-1]))
        return _broadcast_matrix(E, t, s, x.shape[:2])

    if envelope is None:
        if callable(D):
            raise ValueError("Time-dependent coefficients need an explicit envelope kernel")
        D_arr = np.asarray(D, dtype=float)
        norm = float(np.sqrt(sum(np.linalg.norm(D_arr[:, k, :], 2) ** 2 for k in range(D_arr.shape[1]))))
        envelope = factor.scaled(norm) if factor is not None else Kernel.constant(norm)
    if factor is not None:
        return Coefficient(lambda s, x, u: core(None, s, x, u), envelope, factor,
                           lambda s, x, u: dx(None, s, x, u), lambda s, x, u: du(None, s, x, u), name)
    return Coefficient(core, envelope, None, dx, du, name)


@dataclass
class SvieProblem:
    """Forward SVIE data; phi may be a constant vector, a full (P, N+1, n) array or a callable of the ensemble."""

    n: int
    phi: Union[float, np.ndarray, Callable] = 0.0
    drift: Optional[Coefficient] = None
    diffusion: Optional[Coefficient] = None
    control: Optional[np.ndarray] = None
    mu: float = 1.0

    def free_term(self, ens: FilteredEnsemble) -> np.ndarray:
        phi = self.phi(ens) if callable(self.phi) else np.asarray(self.phi, dtype=float)
        shape = (ens.paths, ens.steps + 1, self.n)
        if phi.ndim == 2 and self.n == 1:
            phi = phi[..., None]
        if phi.shape == shape:
            return phi
        return np.broadcast_to(phi.reshape(-1)[:self.n] if phi.size == self.n else phi, shape).copy()

    def control_values(self, ens: FilteredEnsemble) -> np.ndarray:
        if self.control is None:
            return np.zeros((ens.paths, ens.steps + 1, 0))
        return np.asarray(self.control, dtype=float)

    def envelopes(self) -> Tuple[Kernel, Kernel]:
        kb = self.drift.envelope if self.drift is not None else Kernel.zero()
        ks = self.diffusion.envelope if self.diffusion is not None else Kernel.zero()
        return kb, ks

    def domain(self) -> DomainReport:
        kb, ks = self.envelopes()
        return svie_domain(kb, ks, self.mu)


def linear_problem(n: int, A, D=None, phi=1.0, mu: float = 1.0,
                   factor: Optional[Kernel] = None) -> SvieProblem:
    """Uncontrolled X = phi + int A X ds + int D X dW, D given as (n, d, n)."""
    drift = linear_drift(np.asarray(A, dtype=float).reshape(n, n), factor=factor, name='b')
    diffusion = None
    if D is not None:
        diffusion = linear_diffusion(np.asarray(D, dtype=float).reshape(n, -1, n), factor=factor, name='sigma')
    return SvieProblem(n, phi, drift, diffusion, mu=mu)


def lipschitz_spot_check(p: SvieProblem, ens: FilteredEnsemble, samples: int = SPOT_CHECK_SAMPLES,
                         seed: int = 0) -> int:
    """Count sampled violations of |c(t,s,x) - c(t,s,x')| <= K(t-s)|x - x'|; warns, never refuses."""
    rng = np.random.default_rng(seed)
    u = p.control_values(ens)
    violations = 0
    for coef in (p.drift, p.diffusion):
        if coef is None:
            continue
        for _ in range(samples):
            j = int(rng.integers(0, ens.steps))
            i = int(rng.integers(j + 1, ens.steps + 1))
            t, s = ens.nodes[i], ens.nodes[j]
            x1 = rng.standard_normal((1, 1, p.n))
            x2 = rng.standard_normal((1, 1, p.n))
            uj = u[:1, j:j + 1]
            if coef.factored:
                scale = float(coef.factor.eval(t - s))
                gap = scale * (coef.func(np.array([s]), x1, uj) - coef.func(np.array([s]), x2, uj))
            else:
                gap = coef.func(np.array([t]), np.array([s]), x1, uj) - coef.func(np.array([t]), np.array([s]), x2, uj)
            bound = float(coef.envelope.eval(t - s)) * float(np.linalg.norm(x1 - x2))
            if np.linalg.norm(gap) > bound * (1.0 + SPOT_CHECK_SLACK) + SPOT_CHECK_SLACK:
                violations += 1
    if violations:
        logger.warning(f"Lipschitz envelope spot check failed on {violations} sample(s)")
    return violations


def _factored_column(coef: Coefficient, ens: FilteredEnsemble, X: np.ndarray, u: np.ndarray,
                     j: int, diffusion: bool) -> np.ndarray:
    value = coef.func(ens.nodes[j:j + 1], X[:, j:j + 1], u[:, j:j + 1])[:, 0]
    if diffusion:
        return np.einsum('pnd,pd->pn', value, ens.dW[:, j])
    return value


def _general_row(coef: Coefficient, ens: FilteredEnsemble, X: np.ndarray, u: np.ndarray,
                 i: int, diffusion: bool) -> np.ndarray:
    t = np.full(i, ens.nodes[i])
    value = coef.func(t, ens.nodes[:i], X[:, :i], u[:, :i])
    if diffusion:
        return np.einsum('pjnd,pjd->pn', value, ens.dW[:, :i])
    return value.sum(axis=1) * ens.h


class _RowAccumulator:
    """Row sums of the drift and stochastic integrals for the explicit scheme."""

    def __init__(self, p: SvieProblem, ens: FilteredEnsemble, u: np.ndarray):
        self.p, self.ens, self.u = p, ens, u
        self.columns = {}
        for key, coef in (('drift', p.drift), ('diffusion', p.diffusion)):
            if coef is not None and coef.factored:
                self.columns[key] = np.zeros((ens.paths, ens.steps, p.n))

    def add_column(self, X: np.ndarray, j: int):
        for key, coef in (('drift', self.p.drift), ('diffusion', self.p.diffusion)):
            if key in self.columns:
                self.columns[key][:, j] = _factored_column(coef, self.ens, X, self.u, j, key == 'diffusion')

    def row(self, X: np.ndarray, i: int) -> np.ndarray:
        ens = self.ens
        total = np.zeros((ens.paths, self.p.n))
        if i == 0:
            return total
        for key, coef in (('drift', self.p.drift), ('diffusion', self.p.diffusion)):
            if coef is None:
                continue
            if coef.factored:
                weights = coef.multipliers(ens.h, ens.steps)[i - np.arange(i)]
                scale = ens.h if key == 'drift' else 1.0
                total += scale * np.einsum('j,pjn->pn', weights, self.columns[key][:, :i])
            else:
                total += _general_row(coef, ens, X, self.u, i, key == 'diffusion')
        return total


def _require_admissible(p: SvieProblem) -> DomainReport:
    report = p.domain()
    if not report.admissible:
        raise InadmissibleError(ERROR_MESSAGES['svie_inadmissible'].format(mu=p.mu, margin=report.margin),
                                margin=report.margin, clause='weight')
    return report


def solve_svie(p: SvieProblem, ens: FilteredEnsemble, check: bool = True) -> AdaptedProcess:
    """Explicit left-point product integration, vectorized over paths."""
    if check:
        _require_admissible(p)
        lipschitz_spot_check(p, ens)
    for coef in (p.drift, p.diffusion):
        if coef is not None and not coef.factored and coef.envelope.singular:
            logger.warning(f"Coefficient '{coef.name}' has a singular envelope but no declared factor; "
                           f"using plain rectangle weights")
    phi = p.free_term(ens)
    u = p.control_values(ens)
    X = np.empty_like(phi)
    X[:, 0] = phi[:, 0]
    acc = _RowAccumulator(p, ens, u)
    for i in range(1, ens.steps + 1):
        acc.add_column(X, i - 1)
        X[:, i] = phi[:, i] + acc.row(X, i)
        if not np.all(np.isfinite(X[:, i])):
            raise NonFiniteError(f"Non-finite state at step {i} (t={ens.nodes[i]:.6g})")
    logger.debug(f"Solved forward SVIE: n={p.n}, paths={ens.paths}, N={ens.steps}")
    return AdaptedProcess(X, ens.grid, name='X')


def volterra_terms(p: SvieProblem, ens: FilteredEnsemble, X: np.ndarray) -> np.ndarray:
    """Integral terms sum_{j<i}(h b + sigma dW) of p evaluated along a given state X."""
    u = p.control_values(ens)
    acc = _RowAccumulator(p, ens, u)
    for j in range(ens.steps):
        acc.add_column(X, j)
    out = np.zeros_like(X)
    for i in range(1, ens.steps + 1):
        out[:, i] = acc.row(X, i)
    return out


def _default_tolerance(p: SvieProblem, ens: FilteredEnsemble) -> float:
    kb, ks = p.envelopes()
    order = min([0.5] + [k.exponent for k in (kb, ks) if k.singular])
    return STABILITY_TOL_FACTOR * ens.h ** order


@dataclass
class StabilityReport:
    lhs: float
    rhs: float
    ok: bool
    constant: float
    tol: float

    def to_dict(self) -> Dict:
        return {'lhs': self.lhs, 'rhs': self.rhs, 'ok': self.ok, 'constant': self.constant, 'tol': self.tol}


def stability_gap(p: SvieProblem, p2: SvieProblem, ens: FilteredEnsemble,
                  tol: Optional[float] = None) -> StabilityReport:
    """Discrete form of ||X - X'|| <= C_mu ||(phi - phi') + terms(p, X') - terms(p', X')|| at weight -mu."""
    report = _require_admissible(p)
    X = solve_svie(p, ens).values
    X2 = solve_svie(p2, ens).values
    perturbation = (p.free_term(ens) - p2.free_term(ens)
                    + volterra_terms(p, ens, X2) - volterra_terms(p2, ens, X2))
    lhs = weighted_sq_norm(ens, X - X2, -p.mu)[1]
    rhs = report.contraction_constant * weighted_sq_norm(ens, perturbation, -p.mu)[1]
    tol = _default_tolerance(p, ens) if tol is None else tol
    return StabilityReport(lhs, rhs, lhs <= rhs * (1.0 + tol), report.contraction_constant, tol)


def apriori_bound(p: SvieProblem, X: np.ndarray, ens: FilteredEnsemble,
                  tol: Optional[float] = None) -> StabilityReport:
    """||X|| <= C_mu ||phi|| at weight -mu, for coefficients vanishing at x = 0."""
    report = _require_admissible(p)
    lhs = weighted_sq_norm(ens, X, -p.mu)[1]
    rhs = report.contraction_constant * weighted_sq_norm(ens, p.free_term(ens), -p.mu)[1]
    tol = _default_tolerance(p, ens) if tol is None else tol
    return StabilityReport(lhs, rhs, lhs <= rhs * (1.0 + tol), report.contraction_constant, tol)
