"""
Problem Specs - Named Coefficient Forms
Builds solver problems from JSON problem descriptions; custom forms can be registered at runtime.
"""

import logging
import math
from typing import Callable, Dict, Optional

import numpy as np

from solvers.bsvie_solver import BsvieProblem, SolverOptions, linear_driver
from solvers.control_opt import (
    ControlProblem,
    DelayTerm,
    IntegroSpec,
    box_projection,
    identity,
    integro_lift,
    make_caputo_problem,
    make_lq_problem,
    make_sde_problem,
    quadratic_cost,
)
from solvers.exceptions import ConfigError
from solvers.kernel_calculus import Kernel, parse_number
from solvers.linear_volterra import LinearBsvieSpec, LinearSvieSpec
from solvers.solver_config import ERROR_MESSAGES, PROBLEM_PRESETS
from solvers.stochastic_core import FilteredEnsemble
from solvers.svie_forward import SvieProblem, linear_problem

logger = logging.getLogger(__name__)

CONTROL_FORMS: Dict[str, Callable[[Dict], ControlProblem]] = {}


def register_form(name: str):
    """Decorator registering a builder of ControlProblem from a JSON dict."""
    def wrap(builder: Callable[[Dict], ControlProblem]):
        if name in CONTROL_FORMS:
            logger.warning(f"Replacing registered coefficient form '{name}'")
        CONTROL_FORMS[name] = builder
        return builder
    return wrap


def _require(data: Dict, key: str):
    if key not in data:
        raise ConfigError(f"Problem spec is missing '{key}'")
    return data[key]


def _number(data: Dict, key: str, default: float) -> float:
    value = parse_number(data.get(key, default))
    if math.isnan(value):
        raise ConfigError(f"'{key}' must be a number, got {data.get(key)!r}")
    return value


def kernel_from(data: Optional[Dict]) -> Kernel:
    if data is None:
        return Kernel.zero()
    try:
        return Kernel.from_dict(data)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"Bad kernel description {data!r}: {e}")


def kernels_from(data: Dict) -> Dict[str, Kernel]:
    """Kernel set from a dict or from a preset name."""
    if isinstance(data, str):
        if data not in PROBLEM_PRESETS:
            raise ConfigError(f"Unknown preset '{data}'; available: {sorted(PROBLEM_PRESETS)}")
        data = PROBLEM_PRESETS[data]['kernels']
    return {name: kernel_from(k) for name, k in data.items()}


def free_term(data) -> Callable[[FilteredEnsemble], np.ndarray]:
    """Free-term process from JSON.

    A number or list is a constant; dicts select a kind:
    'brownian' (offset + scale W(t)), 'terminal' (offset + scale (W_T - W_t)),
    'decaying' (scale e^{-rate t} W(min(t, cap))), 'exponential' (scale e^{-rate t}).
    """
    if not isinstance(data, dict):
        value = np.atleast_1d(np.asarray(data, dtype=float))
        return lambda ens: np.broadcast_to(value, (ens.paths, ens.steps + 1, value.size)).copy()
    kind = data.get('kind', 'constant')
    offset = _number(data, 'offset', 0.0)
    scale = _number(data, 'scale', 1.0)
    rate = _number(data, 'rate', 1.0)

    def build(ens: FilteredEnsemble) -> np.ndarray:
        W = ens.W[..., 0]
        t = ens.nodes[None, :]
        if kind == 'constant':
            values = np.full(W.shape, _number(data, 'value', offset))
        elif kind == 'brownian':
            values = offset + scale * W
        elif kind == 'terminal':
            values = offset + scale * (W[:, -1:] - W)
        elif kind == 'decaying':
            cap = ens.grid.index(min(_number(data, 'cap', 1.0), ens.grid.horizon))
            capped = np.where(np.arange(ens.steps + 1)[None, :] <= cap, W, W[:, cap:cap + 1])
            values = scale * np.exp(-rate * t) * capped
        elif kind == 'exponential':
            values = np.broadcast_to(scale * np.exp(-rate * t), W.shape).copy()
        else:
            raise ConfigError(f"Unknown free-term kind '{kind}'")
        return values[..., None]

    return build


def _matrix(data, shape) -> np.ndarray:
    try:
        return np.asarray(data, dtype=float).reshape(shape)
    except ValueError as e:
        raise ConfigError(f"Coefficient {data!r} does not fit shape {shape}: {e}")


# ---------------------------------------------------------------------------
# Forward, backward and linear problems
# ---------------------------------------------------------------------------

def svie_problem(data: Dict) -> SvieProblem:
    """Linear forward SVIE: {"n", "phi", "A", "D", "factor", "mu"}."""
    n = int(data.get('n', 1))
    factor = kernel_from(data['factor']) if 'factor' in data else None
    try:
        return linear_problem(n, _matrix(data.get('A', 0.0), (n, n)), data.get('D'), free_term(data.get('phi', 1.0)),
                              mu=_number(data, 'mu', 1.0), factor=factor)
    except ValueError as e:
        raise ConfigError(f"Bad forward coefficients: {e}")


def bsvie_problem(data: Dict) -> BsvieProblem:
    """Scalar linear BSVIE: {"psi", "driver": {"c_y", "c_z1", "c_z2", "offset"}, "lambda", "eta", ...}."""
    driver = None
    if data.get('driver'):
        d = data['driver']
        driver = linear_driver(_number(d, 'c_y', 0.0), _number(d, 'c_z1', 0.0), _number(d, 'c_z2', 0.0),
                               _number(d, 'offset', 0.0))
    horizon = data.get('horizon')
    return BsvieProblem(1, free_term(data.get('psi', 1.0)), driver, _number(data, 'lambda', 1.0),
                        _number(data, 'eta', 0.0), None if horizon is None else float(horizon),
                        bool(data.get('diagonal', True)))


def solver_options(data: Optional[Dict], threads: int = 1) -> SolverOptions:
    data = data or {}
    try:
        return SolverOptions(tol=data.get('tol'), max_iter=int(data.get('max_iter', SolverOptions.max_iter)),
                             mode=data.get('mode', SolverOptions.mode),
                             initial=data.get('initial', SolverOptions.initial), threads=threads)
    except ValueError as e:
        raise ConfigError(str(e))


def linear_bsvie_spec(data: Dict) -> LinearBsvieSpec:
    """{"m", "A", "B", "K_A", "K_B", "lambda", "eta"} with constant matrices."""
    m = int(data.get('m', 1))
    B = _matrix(data['B'], (1, m, m)) if 'B' in data else None
    A = _matrix(data.get('A', 0.0), (m, m))
    K_A = kernel_from(data.get('K_A')) if 'K_A' in data else (
        Kernel.constant(float(np.linalg.norm(A, 2))) if np.any(A) else Kernel.zero())
    K_B = kernel_from(data.get('K_B')) if 'K_B' in data else (
        Kernel.constant(float(np.linalg.norm(B[0], 2))) if B is not None and np.any(B) else Kernel.zero())
    return LinearBsvieSpec(m, A, B, K_A, K_B, _number(data, 'lambda', 1.0), _number(data, 'eta', 0.0))


def linear_svie_spec(data: Dict) -> LinearSvieSpec:
    """{"n", "C", "D", "K_C", "K_D"} with constant matrices."""
    n = int(data.get('n', 1))
    C = _matrix(data.get('C', 0.0), (n, n))
    D = _matrix(data['D'], (1, n, n)) if 'D' in data else None
    K_C = kernel_from(data.get('K_C')) if 'K_C' in data else (
        Kernel.constant(float(np.linalg.norm(C, 2))) if np.any(C) else Kernel.zero())
    K_D = kernel_from(data.get('K_D')) if 'K_D' in data else (
        Kernel.constant(float(np.linalg.norm(D[0], 2))) if D is not None and np.any(D) else Kernel.zero())
    return LinearSvieSpec(n, C, D, K_C, K_D)


# ---------------------------------------------------------------------------
# Control forms
# ---------------------------------------------------------------------------

def _projection(data: Dict):
    box = data.get('box')
    if box is None:
        return identity
    return box_projection(float(box[0]), float(box[1]))


def control_problem(data: Dict) -> ControlProblem:
    form = data.get('form', 'lq')
    if form not in CONTROL_FORMS:
        raise ConfigError(ERROR_MESSAGES['unknown_form'].format(form=form, forms=sorted(CONTROL_FORMS)))
    return CONTROL_FORMS[form](data)


@register_form('lq')
def _lq(data: Dict) -> ControlProblem:
    factor = kernel_from(data['factor']) if 'factor' in data else None
    return make_lq_problem(
        data.get('A', 0.0), _require(data, 'B'), data.get('M1', 1.0), data.get('M2', 1.0),
        C=data.get('C'), D=data.get('D'), M3=data.get('M3'), x0=data.get('x0', 1.0),
        mu=_number(data, 'mu', 0.5), lam=_number(data, 'lambda', 1.0), factor=factor,
        projection=_projection(data))


def _scalar_linear(a: float, c: float):
    """(func, dx, du) of (s, x, u) -> a x + c u for scalar state and control."""
    def func(s, x, u):
        return a * x + c * u
    def dx(s, x, u):
        return np.full(x.shape + (1,), a)
    def du(s, x, u):
        return np.full(x.shape + (1,), c)
    return func, dx, du


def _scalar_diffusion(a: float, c: float):
    def func(s, x, u):
        return (a * x + c * u)[..., None]
    def dx(s, x, u):
        return np.full(x.shape + (1, 1), a)
    def du(s, x, u):
        return np.full(x.shape + (1, 1), c)
    return func, dx, du


def _scalar_cost(data: Dict):
    return quadratic_cost(data.get('M1', 1.0), data.get('M2', 1.0), data.get('M3'))


@register_form('sde')
def _sde(data: Dict) -> ControlProblem:
    a, c = _number(data, 'b_x', 0.0), _number(data, 'b_u', 1.0)
    sa, sc = _number(data, 'sigma_x', 0.0), _number(data, 'sigma_u', 0.0)
    sigma = _scalar_diffusion(sa, sc) if (sa or sc) else None
    lipschitz = {'b_x': abs(a), 'b_u': abs(c), 'sigma_x': abs(sa), 'sigma_u': abs(sc)}
    return make_sde_problem(_scalar_linear(a, c), sigma, _scalar_cost(data), lipschitz,
                            x0=data.get('x0', 1.0), mu=_number(data, 'mu', 0.5),
                            lam=_number(data, 'lambda', 1.0), projection=_projection(data))


@register_form('caputo')
def _caputo(data: Dict) -> ControlProblem:
    a, c = _number(data, 'b_x', 0.0), _number(data, 'b_u', 1.0)
    sa, sc = _number(data, 'sigma_x', 0.0), _number(data, 'sigma_u', 0.0)
    coeffs = {
        'b': _scalar_linear(a, c),
        'sigma': _scalar_diffusion(sa, sc) if (sa or sc) else None,
        'cost': _scalar_cost(data),
        'lipschitz': {'b_x': abs(a), 'b_u': abs(c), 'sigma_x': abs(sa), 'sigma_u': abs(sc)},
        'x0': data.get('x0', 1.0),
        'projection': _projection(data),
    }
    mu = data.get('mu')
    return make_caputo_problem(_number(data, 'alpha', 0.75), coeffs, _number(data, 'lambda', 1.0),
                               None if mu is None else float(mu))


@register_form('integro')
def _integro(data: Dict) -> ControlProblem:
    """Scalar integro-differential form with exponential delay kernels k_i e^{-r_i (t-s)}.

    b = b_x x + k_1 y1 + k_2 y2 + b_u u and sigma = sigma_x x + sigma_u u.
    """
    a, c = _number(data, 'b_x', 0.0), _number(data, 'b_u', 1.0)
    sa, sc = _number(data, 'sigma_x', 0.0), _number(data, 'sigma_u', 0.0)
    w1, w2 = _number(data, 'w1', 1.0), _number(data, 'w2', 1.0)
    delays = {}
    for k in (1, 2):
        entry = data.get(f"A{k}")
        if entry is None:
            continue
        scale, rate = _number(entry, 'scale', 1.0), _number(entry, 'rate', 1.0)
        delays[k] = DelayTerm(lambda t, s, scale=scale, rate=rate: (scale * np.exp(-rate * (t - s)))[:, None, None],
                              Kernel.exponential(rate, abs(scale)), 1)

    def b(s, x, y1, y2, u):
        out = a * x + c * u
        if y1.shape[-1]:
            out = out + w1 * y1
        if y2.shape[-1]:
            out = out + w2 * y2
        return out

    partials = {
        'x': lambda s, x, y1, y2, u: np.full(x.shape + (1,), a),
        'y1': lambda s, x, y1, y2, u: np.full(x.shape + (1,), w1),
        'y2': lambda s, x, y1, y2, u: np.full(x.shape + (1,), w2),
        'u': lambda s, x, y1, y2, u: np.full(x.shape + (1,), c),
    }
    sigma, sigma_partials = None, {}
    if sa or sc:
        sigma = lambda s, x, y3, y4, u: (sa * x + sc * u)[..., None]
        sigma_partials = {
            'x': lambda s, x, y3, y4, u: np.full(x.shape + (1, 1), sa),
            'u': lambda s, x, y3, y4, u: np.full(x.shape + (1, 1), sc),
        }
    lipschitz = {'b_x': abs(a), 'b_y1': abs(w1) if 1 in delays else 0.0, 'b_y2': abs(w2) if 2 in delays else 0.0,
                 'b_u': abs(c), 'sigma_x': abs(sa), 'sigma_u': abs(sc)}
    spec = IntegroSpec(1, 1, b, partials, _scalar_cost(data), sigma, sigma_partials, delays, lipschitz,
                       x0=data.get('x0', 1.0), mu=_number(data, 'mu', 0.5), lam=_number(data, 'lambda', 1.0),
                       projection=_projection(data))
    return integro_lift(spec)
