"""
Solver Configuration and Constants
Provides numeric defaults, presets, and message tables for the Volterra solvers.
"""

import os

# Kernel quadrature settings
QUADRATURE = {
    'split_point': 1.0,
    'graded_cells': 60,
    'grading_ratio': 0.5,
    'gauss_nodes': 16,
    'tail_cutoff': 1e-16,
    'tail_epsrel': 1e-12,
    'max_tail_doublings': 200,
}

# Root search for critical weights
BISECTION = {
    'abs_tol': 1e-10,
    'max_iter': 200,
    'bracket_low': 1e-8,
    'bracket_high': 1e8,
}

# Ensemble limits
MAX_TREE_STEPS = 20
MAX_TREE_DIMENSION = 1
DEFAULT_MEMORY_BUDGET_GB = float(os.getenv('VOLTERRA_MEMORY_BUDGET_GB', '4'))
DEFAULT_THREADS = int(os.getenv('VOLTERRA_THREADS', '1'))

# Least-squares Monte Carlo
LSMC = {
    'degree': 2,
    'ridge_penalty': 1e-10,
    'rank_rtol': 1e-12,
}

# BSVIE fixed-point iteration
DEFAULT_SOLVER_OPTIONS = {
    'tree_tol': 1e-8,
    'mc_relative_tol': 1e-4,
    'max_iter': 500,
    'mode': 'auto',
    'initial': 'zero',
    'auto_ratio': 0.95,
    'continuation_safety': 0.9,
    'stall_window': 3,
}

# Resolvent series
SERIES_TOL = 1e-10
MAX_SERIES_TERMS = 200

# Projected gradient with Armijo backtracking
ARMIJO = {
    'c': 1e-4,
    'initial_step': 1.0,
    'shrink': 0.5,
    'max_backtracks': 30,
}
DEFAULT_OPTIMIZE_OPTIONS = {
    'tol': 1e-6,
    'max_iter': 200,
}
ADJOINT_TOL = 1e-12

# Tolerance used by the a priori and stability checks
APRIORI_TOL = 0.05
STABILITY_TOL_FACTOR = 5.0

# Lipschitz spot checks
SPOT_CHECK_SAMPLES = 16
SPOT_CHECK_SLACK = 1e-8

# CLI exit codes per error category
EXIT_CODES = {
    'ok': 0,
    'io_error': 1,
    'inadmissible': 2,
    'convergence': 3,
    'memory': 4,
    'unexpected': 5,
}

# Error messages
ERROR_MESSAGES = {
    'invalid_p': 'Weighted norms are defined for p in {{1, 2}}, got {p}',
    'nan_parameter': 'Kernel parameters must not be NaN: {kernel}',
    'tree_dimension': 'Tree ensembles support a single Brownian coordinate, got d={d}',
    'tree_steps': 'Tree ensembles support at most {limit} steps, got N={steps}',
    'memory': 'Requested arrays need {need:.2f} GiB, above the {budget:.2f} GiB budget',
    'svie_inadmissible': 'Weight mu={mu} is not admissible: kernel norm margin {margin:.6g} <= 0',
    'bsvie_inadmissible': 'Pair (eta={eta}, lambda={lam}) is outside the driver domain: margin {margin:.6g} <= 0',
    'no_contraction': 'Iteration is not contracting: distance ratio >= 1 for {count} consecutive sweeps',
    'max_iter': 'Iteration did not reach tol={tol:.3g} within {max_iter} sweeps (last distance {dist:.3g})',
    'series_ratio': 'Resolvent series ratio {ratio:.6g} >= 1, coefficients outside the linear domain',
    'tail_not_decaying': 'Tail norm of the free term does not decay; supply the horizon explicitly',
    'bsde_hypothesis': 'Reduction needs lambda >= 2 mu > 0, got lambda={lam}, mu={mu}',
    'duality_hypothesis': 'Duality needs eta + lambda >= mu > rho_CD, got eta={eta}, lambda={lam}, mu={mu}, rho={rho}',
    'control_inadmissible': 'Control problem is inadmissible at mu={mu}, lambda={lam}: failed {clauses}',
    'alpha_range': 'Caputo order must lie in (1/2, 1), got alpha={alpha}',
    'stalled': 'No Armijo descent after {count} backtracks at iteration {iteration}',
    'unknown_form': "Unknown coefficient form '{form}'; registered forms: {forms}",
    'unbounded_delay': 'Delay kernels A1, A3 must be bounded to lift the adjoint envelope, got {k1} and {k3}',
}

# Named presets for the command-line front end
PROBLEM_PRESETS = {
    'sde-unit': {
        'description': 'Unit Lipschitz SDE kernels (constant envelopes)',
        'kernels': {
            'b_x': {'kind': 'constant', 'scale': 1.0},
            'sigma_x': {'kind': 'constant', 'scale': 1.0},
        },
    },
    'caputo-unit': {
        'description': 'Unit Lipschitz Caputo kernels of order 0.75',
        'kernels': {
            'b_x': {'kind': 'fractional', 'alpha': 0.75, 'scale': 1.0 / 1.2254167024651776},
            'sigma_x': {'kind': 'fractional', 'alpha': 0.75, 'scale': 1.0 / 1.2254167024651776},
        },
    },
}

# Float format used for CSV artifacts
CSV_FLOAT_FORMAT = '%.17g'
