"""
Kernel Calculus - Weighted Norms and Admissibility Domains
Evaluates convolution kernels, their exponentially weighted L^p norms, and the weights and constants derived from them.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import integrate, special

from solvers.solver_config import BISECTION, ERROR_MESSAGES, QUADRATURE

logger = logging.getLogger(__name__)

KERNEL_KINDS = ('fractional', 'exponential', 'constant', 'power_times_exponential', 'zero')


def json_number(value: float):
    """Serialize a float so that infinities survive JSON."""
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return float(value)


def parse_number(value) -> float:
    """Inverse of json_number."""
    if isinstance(value, str):
        return float(value.strip())
    return float(value)


@dataclass(frozen=True)
class Kernel:
    """Scalar envelope K(tau) = scale * tau^(alpha-1) * exp(-rate * tau) on tau > 0."""

    kind: str = 'zero'
    alpha: float = 1.0
    rate: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"Unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}")
        for name in ('alpha', 'rate', 'scale'):
            value = getattr(self, name)
            if value is None or math.isnan(value):
                raise ValueError(ERROR_MESSAGES['nan_parameter'].format(kernel=self))
        if self.scale < 0:
            raise ValueError(f"Kernel scale must be nonnegative, got {self.scale}")
        if self.kind == 'fractional' and not 0.5 < self.alpha < 1.0:
            raise ValueError(f"Fractional kernels need alpha in (1/2, 1), got {self.alpha}")
        if self.kind == 'power_times_exponential' and self.alpha <= 0:
            raise ValueError(f"Power-times-exponential kernels need alpha > 0, got {self.alpha}")

    # ---- constructors -------------------------------------------------

    @classmethod
    def fractional(cls, alpha: float, scale: float = 1.0) -> 'Kernel':
        return cls('fractional', alpha=alpha, scale=scale)

    @classmethod
    def caputo(cls, alpha: float, lipschitz: float = 1.0) -> 'Kernel':
        """Kernel L * tau^(alpha-1) / Gamma(alpha) of a Caputo mild form."""
        return cls('fractional', alpha=alpha, scale=lipschitz / special.gamma(alpha))

    @classmethod
    def exponential(cls, rate: float, scale: float = 1.0) -> 'Kernel':
        return cls('exponential', rate=rate, scale=scale)

    @classmethod
    def constant(cls, scale: float = 1.0) -> 'Kernel':
        return cls('constant', scale=scale)

    @classmethod
    def power_exp(cls, alpha: float, rate: float, scale: float = 1.0) -> 'Kernel':
        return cls('power_times_exponential', alpha=alpha, rate=rate, scale=scale)

    @classmethod
    def zero(cls) -> 'Kernel':
        return cls('zero')

    @classmethod
    def from_dict(cls, data: Dict) -> 'Kernel':
        """Build a kernel from its JSON object."""
        kind = data.get('kind', 'zero')
        default_scale = 0.0 if kind == 'zero' else 1.0
        return cls(
            kind=kind,
            alpha=float(data.get('alpha', 1.0)),
            rate=float(data.get('rate', 0.0)),
            scale=float(data.get('scale', default_scale)),
        )

    def to_dict(self) -> Dict:
        return {'kind': self.kind, 'alpha': self.alpha, 'rate': self.rate, 'scale': self.scale}

    # ---- shape ----------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return self.kind == 'zero' or self.scale == 0.0

    @property
    def exponent(self) -> float:
        """Power alpha in tau^(alpha-1)."""
        return self.alpha if self.kind in ('fractional', 'power_times_exponential') else 1.0

    @property
    def decay(self) -> float:
        """Exponential rate a in exp(-a tau)."""
        return self.rate if self.kind in ('exponential', 'power_times_exponential') else 0.0

    @property
    def p_integrability(self) -> Tuple[int, ...]:
        """Exponents p in {1, 2} for which K^p is integrable near zero."""
        if self.is_zero:
            return (1, 2)
        return tuple(p for p in (1, 2) if p * (self.exponent - 1.0) > -1.0)

    @property
    def singular(self) -> bool:
        return not self.is_zero and self.exponent < 1.0

    @property
    def sup(self) -> float:
        """sup of K over tau > 0; +inf for singular or growing kernels."""
        if self.is_zero:
            return 0.0
        alpha, a = self.exponent, self.decay
        if alpha < 1.0 or a < 0.0 or (alpha > 1.0 and a == 0.0):
            return math.inf
        if alpha == 1.0:
            return self.scale
        peak = (alpha - 1.0) / a
        return self.scale * peak ** (alpha - 1.0) * math.exp(-(alpha - 1.0))

    def scaled(self, factor: float) -> 'Kernel':
        if factor < 0:
            raise ValueError(f"Kernel scaling factor must be nonnegative, got {factor}")
        return replace(self, scale=self.scale * factor)

    def eval(self, tau):
        """Kernel values on tau > 0; non-positive arguments map to 0."""
        tau_arr = np.asarray(tau, dtype=float)
        if self.is_zero:
            return np.zeros_like(tau_arr) if tau_arr.ndim else 0.0
        positive = tau_arr > 0
        safe = np.where(positive, tau_arr, 1.0)
        values = self.scale * safe ** (self.exponent - 1.0) * np.exp(-self.decay * safe)
        values = np.where(positive, values, 0.0)
        return values if tau_arr.ndim else float(values)

    __call__ = eval

    def cell_integrals(self, h: float, count: int) -> np.ndarray:
        """Integrals of K over the cells [(l-1)h, lh] for l = 1..count."""
        if count <= 0:
            return np.zeros(0)
        if self.is_zero:
            return np.zeros(count)
        ell = np.arange(1, count + 1, dtype=float)
        c, a, alpha = self.scale, self.decay, self.exponent
        if self.kind == 'fractional':
            return c * h ** alpha / alpha * (ell ** alpha - (ell - 1.0) ** alpha)
        if self.kind in ('constant', 'exponential'):
            if a == 0.0:
                return np.full(count, c * h)
            return c * (np.exp(-a * (ell - 1.0) * h) - np.exp(-a * ell * h)) / a
        weights = np.empty(count)
        weights[0] = c * _graded_head(alpha - 1.0, a, h)
        for l in range(2, count + 1):
            value, _ = integrate.quad(
                lambda t: t ** (alpha - 1.0) * math.exp(-a * t), (l - 1) * h, l * h,
                epsabs=0.0, epsrel=QUADRATURE['tail_epsrel'], limit=200,
            )
            weights[l - 1] = c * value
        return weights


# ---------------------------------------------------------------------------
# Weighted norms
# ---------------------------------------------------------------------------

def _check_norm_args(p, rho):
    if p not in (1, 2):
        raise ValueError(ERROR_MESSAGES['invalid_p'].format(p=p))
    if rho is None or math.isnan(rho):
        raise ValueError(f"Weight rho must be a number, got {rho}")


def _graded_head(beta: float, s: float, width: float) -> float:
    """Integral of tau^beta * exp(-s tau) over [0, width], beta > -1.

    Dyadic cells accumulate toward zero; in each cell the power factor is
    absorbed by the substitution x = tau^(beta+1)/(beta+1) and the smooth
    exponential factor is sampled at Gauss-Legendre nodes.
    """
    cells = QUADRATURE['graded_cells']
    ratio = QUADRATURE['grading_ratio']
    nodes, weights = np.polynomial.legendre.leggauss(QUADRATURE['gauss_nodes'])
    q = beta + 1.0
    edges = width * ratio ** np.arange(cells + 1)
    x_hi = edges[:-1] ** q / q
    x_lo = edges[1:] ** q / q
    mid = 0.5 * (x_hi + x_lo)
    half = 0.5 * (x_hi - x_lo)
    x = mid[:, None] + half[:, None] * nodes[None, :]
    tau = (q * x) ** (1.0 / q)
    total = float(np.sum(half[:, None] * weights[None, :] * np.exp(-s * tau)))
    # innermost cell: exp(-s tau) is 1 to double precision there
    return total + edges[-1] ** q / q


def _tail_integral(beta: float, s: float, start: float) -> float:
    """Integral of tau^beta * exp(-s tau) over [start, inf) for s > 0."""
    def integrand(t):
        return math.exp(beta * math.log(t) - s * t)

    reference = integrand(start)
    end = 2.0 * start
    doublings = 0
    peak = max(beta / s, start)
    while (end < peak or integrand(end) > QUADRATURE['tail_cutoff'] * reference) \
            and doublings < QUADRATURE['max_tail_doublings']:
        end *= 2.0
        doublings += 1
    total = 0.0
    lo = start
    while lo < end:
        hi = 2.0 * lo
        value, _ = integrate.quad(integrand, lo, hi, epsabs=0.0,
                                  epsrel=QUADRATURE['tail_epsrel'], limit=200)
        total += value
        lo = hi
    return total


def quadrature_norm(k: Kernel, p: int, rho: float) -> float:
    """Weighted norm [k]_p(rho) by graded quadrature, whatever the kernel kind."""
    _check_norm_args(p, rho)
    if k.is_zero:
        return 0.0
    beta = p * (k.exponent - 1.0)
    s = p * (rho + k.decay)
    if beta <= -1.0 or s <= 0.0:
        return math.inf
    split = QUADRATURE['split_point']
    total = _graded_head(beta, s, split) + _tail_integral(beta, s, split)
    return k.scale * total ** (1.0 / p)


def weighted_norm(k: Kernel, p: int, rho: float) -> float:
    """[k]_p(rho) = (int_0^inf exp(-p rho tau) k(tau)^p dtau)^(1/p), +inf when divergent."""
    _check_norm_args(p, rho)
    if k.is_zero:
        return 0.0
    c = k.scale
    if k.kind == 'fractional':
        if rho <= 0.0:
            return math.inf
        alpha = k.alpha
        if p == 1:
            return c * special.gamma(alpha) * rho ** (-alpha)
        return c * math.sqrt(special.gamma(2.0 * alpha - 1.0) * (2.0 * rho) ** (1.0 - 2.0 * alpha))
    if k.kind in ('constant', 'exponential'):
        s = rho + k.decay
        if s <= 0.0:
            return math.inf
        return c / s if p == 1 else c / math.sqrt(2.0 * s)
    return quadrature_norm(k, p, rho)


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

@dataclass
class DomainReport:
    """Admissibility of a weight (forward/control) or of a pair (eta, lambda) (backward)."""

    kind: str
    rho_star: float
    weight: Tuple[float, ...]
    margin: float
    contraction_constant: float
    admissible: bool
    failed_clauses: List[str] = field(default_factory=list)
    details: Dict[str, float] = field(default_factory=dict)
    kernels: Dict[str, Kernel] = field(default_factory=dict, repr=False)

    def margin_at(self, *weight: float) -> float:
        """Recompute the margin at another weight (rho) or pair (eta, lambda)."""
        if self.kind == 'bsvie':
            eta, lam = weight
            return bsvie_margin(self.kernels['g_y'], self.kernels['g_z1'], self.kernels['g_z2'], eta, lam)[0]
        if self.kind == 'control':
            rho = weight[0]
            return 1.0 - weighted_norm(self.kernels['b_x'], 1, rho) - weighted_norm(self.kernels['sigma_x'], 2, rho)
        return svie_margin(self.kernels['b'], self.kernels['sigma'], weight[0])

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'rho_star': json_number(self.rho_star),
            'weight': [json_number(w) for w in self.weight],
            'margin': json_number(self.margin),
            'contraction_constant': json_number(self.contraction_constant),
            'admissible': self.admissible,
            'failed_clauses': list(self.failed_clauses),
            'details': {key: json_number(value) for key, value in self.details.items()},
            'kernels': {name: k.to_dict() for name, k in self.kernels.items()},
        }


def _norm_sum(terms: List[Tuple[Kernel, int]]) -> Callable[[float], float]:
    def total(rho: float) -> float:
        return sum(weighted_norm(k, p, rho) for k, p in terms)
    return total


def critical_weight(kb: Kernel, ksigma: Kernel) -> float:
    """Smallest rho with [kb]_1(rho) + [ksigma]_2(rho) <= 1, by bisection on the monotone sum."""
    terms = [(k, p) for k, p in ((kb, 1), (ksigma, 2)) if not k.is_zero]
    if not terms:
        return -math.inf
    if any(p * (k.exponent - 1.0) <= -1.0 for k, p in terms):
        logger.warning(f"Kernel norm diverges for every weight: {[k.to_dict() for k, _ in terms]}")
        return math.inf
    total = _norm_sum(terms)
    rho_min = max(-k.decay for k, _ in terms)

    hi = max(rho_min, 0.0) + 1.0
    while total(hi) > 1.0:
        hi = rho_min + 2.0 * (hi - rho_min)
        if hi > BISECTION['bracket_high']:
            logger.warning(f"Norm sum stays above 1 up to rho={BISECTION['bracket_high']:.0e}; "
                           f"critical weight reported as +inf")
            return math.inf

    lo = rho_min + 0.5 * (hi - rho_min)
    while total(lo) <= 1.0:
        if lo - rho_min <= BISECTION['bracket_low']:
            # the sum stays below 1 down to the divergence boundary
            return rho_min
        hi = lo
        lo = rho_min + 0.5 * (lo - rho_min)

    for _ in range(BISECTION['max_iter']):
        if hi - lo <= BISECTION['abs_tol']:
            break
        mid = 0.5 * (lo + hi)
        if total(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def svie_margin(kb: Kernel, ksigma: Kernel, mu: float) -> float:
    return 1.0 - weighted_norm(kb, 1, mu) - weighted_norm(ksigma, 2, mu)


def svie_domain(kb: Kernel, ksigma: Kernel, mu: float) -> DomainReport:
    """Forward admissibility at weight mu with C_mu = 1 / margin."""
    margin = svie_margin(kb, ksigma, mu)
    ok = margin > 0.0
    return DomainReport(
        kind='svie',
        rho_star=critical_weight(kb, ksigma),
        weight=(mu,),
        margin=margin,
        contraction_constant=1.0 / margin if ok else math.inf,
        admissible=ok,
        failed_clauses=[] if ok else ['weight'],
        kernels={'b': kb, 'sigma': ksigma},
    )


def bsvie_margin(kgy: Kernel, kgz1: Kernel, kgz2: Kernel, eta: float, lam: float) -> Tuple[float, float]:
    """Return (margin, C_{eta,lambda}); the pair is admissible iff margin > 0."""
    margin = (1.0 - weighted_norm(kgy, 1, eta + lam)
              - weighted_norm(kgz1, 2, lam)
              - weighted_norm(kgz2, 2, eta + lam))
    constant = math.sqrt(2.0) / margin if margin > 0.0 else math.inf
    return margin, constant


def bsvie_domain(kgy: Kernel, kgz1: Kernel, kgz2: Kernel, eta: float, lam: float) -> DomainReport:
    margin, constant = bsvie_margin(kgy, kgz1, kgz2, eta, lam)
    ok = margin > 0.0
    return DomainReport(
        kind='bsvie',
        rho_star=math.nan,
        weight=(eta, lam),
        margin=margin,
        contraction_constant=constant,
        admissible=ok,
        failed_clauses=[] if ok else ['driver_margin'],
        details={
            'g_y_norm': weighted_norm(kgy, 1, eta + lam),
            'g_z1_norm': weighted_norm(kgz1, 2, lam),
            'g_z2_norm': weighted_norm(kgz2, 2, eta + lam),
        },
        kernels={'g_y': kgy, 'g_z1': kgz1, 'g_z2': kgz2},
    )


def _divergence_boundary(kernels: List[Tuple[Kernel, int]]) -> float:
    """inf of the weights where all listed norms are finite."""
    active = [(k, p) for k, p in kernels if not k.is_zero]
    if not active:
        return -math.inf
    if any(p * (k.exponent - 1.0) <= -1.0 for k, p in active):
        return math.inf
    return max(-k.decay for k, _ in active)


def control_domain(kernels: Dict[str, Kernel], mu: float, lam: float) -> DomainReport:
    """Weight/discount admissibility of a controlled SVIE."""
    kbx = kernels.get('b_x', Kernel.zero())
    ksx = kernels.get('sigma_x', Kernel.zero())
    kbu = kernels.get('b_u', Kernel.zero())
    ksu = kernels.get('sigma_u', Kernel.zero())
    state_root = critical_weight(kbx, ksx)
    control_edge = _divergence_boundary([(kbu, 1), (ksu, 2)])
    rho_star = max(0.0, state_root, control_edge)

    failed = []
    if not mu > rho_star:
        failed.append('weight')
    if not lam >= 2.0 * mu:
        failed.append('discount')
    margin = 1.0 - weighted_norm(kbx, 1, mu) - weighted_norm(ksx, 2, mu) if mu > 0 else -math.inf
    ok = not failed
    if not ok:
        logger.warning(f"Control problem inadmissible at mu={mu}, lambda={lam}: "
                       f"failed {failed} (rho_star={rho_star:.6g})")
    return DomainReport(
        kind='control',
        rho_star=rho_star,
        weight=(mu, lam),
        margin=margin,
        contraction_constant=1.0 / margin if margin > 0 else math.inf,
        admissible=ok,
        failed_clauses=failed,
        details={'state_root': state_root, 'control_edge': control_edge},
        kernels={'b_x': kbx, 'sigma_x': ksx, 'b_u': kbu, 'sigma_u': ksu},
    )


def control_admissible(kernels: Dict[str, Kernel], mu: float, lam: float) -> Tuple[bool, float]:
    report = control_domain(kernels, mu, lam)
    return report.admissible, report.rho_star


# ---------------------------------------------------------------------------
# Closed-form rates of the worked examples
# ---------------------------------------------------------------------------

def sde_rate(l_bx: float, l_sx: float, rho: float) -> float:
    """L_bx / rho + L_sx / sqrt(2 rho) for constant envelopes."""
    if rho <= 0:
        return math.inf
    return l_bx / rho + l_sx / math.sqrt(2.0 * rho)


def caputo_rate(alpha: float, l_bx: float, l_sx: float, rho: float) -> float:
    if rho <= 0:
        return math.inf
    return (l_bx * rho ** (-alpha)
            + l_sx * math.sqrt(special.gamma(2.0 * alpha - 1.0)) / special.gamma(alpha)
            * (2.0 * rho) ** (0.5 - alpha))


def caputo_kernels(alpha: float, l_bx: float = 1.0, l_bu: float = 1.0,
                   l_sx: float = 1.0, l_su: float = 1.0) -> Dict[str, Kernel]:
    """Envelope set of a Caputo problem with the given Lipschitz constants."""
    return {
        'b_x': Kernel.caputo(alpha, l_bx),
        'b_u': Kernel.caputo(alpha, l_bu),
        'sigma_x': Kernel.caputo(alpha, l_sx),
        'sigma_u': Kernel.caputo(alpha, l_su),
    }


def invert_rate(rate: Callable[[float], float], target: float = 1.0,
                lo: float = 1e-8, hi: float = 1.0) -> Optional[float]:
    """Root of a decreasing rate function, used to cross-check critical weights."""
    while rate(hi) > target:
        hi *= 2.0
        if hi > BISECTION['bracket_high']:
            return None
    for _ in range(BISECTION['max_iter']):
        if hi - lo <= BISECTION['abs_tol']:
            break
        mid = 0.5 * (lo + hi)
        if rate(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
