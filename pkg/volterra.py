"""
Volterra Solver - Main Application
Batch front end for the stochastic Volterra solvers: admissibility domains, forward and backward equations, duality and control.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from results_manager import RunRegistry, write_csv, write_grid, write_json, write_manifest
from solvers.bsvie_solver import apriori_check, solve_bsvie
from solvers.control_opt import OptimizeOptions, optimize
from solvers.exceptions import (
    ConfigError,
    ConvergenceError,
    HorizonError,
    InadmissibleError,
    MemoryBudgetError,
    NonFiniteError,
)
from solvers.kernel_calculus import Kernel, bsvie_domain, control_domain, parse_number, svie_domain
from solvers.linear_volterra import bsvie_to_bsde, duality_check, variation_of_constants
from solvers.problem_specs import (
    bsvie_problem,
    control_problem,
    free_term,
    kernels_from,
    linear_bsvie_spec,
    linear_svie_spec,
    solver_options,
    svie_problem,
)
from solvers.solver_config import DEFAULT_MEMORY_BUDGET_GB, DEFAULT_OPTIMIZE_OPTIONS, DEFAULT_THREADS, EXIT_CODES
from solvers.stochastic_core import EnsembleSpec, FilteredEnsemble, TimeGrid, build_ensemble
from solvers.svie_forward import apriori_bound, solve_svie

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def configure_logging():
    """Log to VOLTERRA_LOG_FILE and the console at level VOLTERRA_LOG."""
    level = getattr(logging, os.getenv('VOLTERRA_LOG', 'INFO').upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.getenv('VOLTERRA_LOG_FILE', 'volterra.log')),
            logging.StreamHandler()
        ],
        force=True
    )


@dataclass
class RunConfig:
    """One batch job: command, problem JSON and the numerical setup."""

    command: str
    config_path: Optional[Path]
    grid: TimeGrid
    ensemble: EnsembleSpec
    seed: int
    threads: int
    out_dir: Path
    problem: Dict = field(default_factory=dict)
    raw: Dict = field(default_factory=dict)
    memory_budget_gb: float = DEFAULT_MEMORY_BUDGET_GB

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        raw: Dict = {}
        path = Path(args.config) if args.config else None
        if path is not None:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
            if not isinstance(raw, dict):
                raise ConfigError(f"Config {path} must hold a JSON object")

        try:
            grid_value = args.grid or raw.get('grid', '1,8')
            if isinstance(grid_value, dict):
                grid = TimeGrid(float(grid_value['T']), int(grid_value['N']))
            else:
                grid = TimeGrid.parse(str(grid_value))
            seed = args.seed if args.seed is not None else int(raw.get('seed', 0))
            if not 0 <= seed < 1 << 64:
                raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {seed}")
            ensemble = EnsembleSpec.parse(str(args.ensemble or raw.get('ensemble', 'tree')), seed=seed,
                                          dim=int(raw.get('dim', 1)))
            threads = args.threads if args.threads is not None else int(raw.get('threads', DEFAULT_THREADS))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Bad run settings: {e}")
        if threads < 1:
            raise ConfigError(f"Thread count must be positive, got {threads}")
        out_dir = Path(args.out or raw.get('out') or Path('results') / args.command)
        return cls(
            command=args.command,
            config_path=path,
            grid=grid,
            ensemble=ensemble,
            seed=seed,
            threads=threads,
            out_dir=out_dir,
            problem=raw.get('problem', {}),
            raw=raw,
            memory_budget_gb=float(raw.get('memory_budget_gb', DEFAULT_MEMORY_BUDGET_GB)),
        )

    def build_ensemble(self) -> FilteredEnsemble:
        return build_ensemble(self.grid, self.ensemble, self.memory_budget_gb, self.threads)

    def number(self, key: str, default: float) -> float:
        return parse_number(self.problem.get(key, default))

    def solver_options(self):
        return solver_options(self.raw.get('solver'), self.threads)

    def manifest_config(self) -> Dict:
        return self.raw or {'problem': self.problem}


CommandResult = Tuple[Dict, List[str]]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_domain(config: RunConfig) -> CommandResult:
    """Admissibility report for an svie, bsvie or control kernel set."""
    problem = config.problem
    kind = problem.get('type', 'svie')
    kernels = kernels_from(problem.get('preset') or problem.get('kernels', {}))
    zero = Kernel.zero()
    if kind == 'svie':
        kb = kernels.get('b', kernels.get('b_x', zero))
        ks = kernels.get('sigma', kernels.get('sigma_x', zero))
        report = svie_domain(kb, ks, config.number('mu', 1.0))
    elif kind == 'bsvie':
        report = bsvie_domain(kernels.get('g_y', zero), kernels.get('g_z1', zero), kernels.get('g_z2', zero),
                              config.number('eta', 0.0), config.number('lambda', 1.0))
    elif kind == 'control':
        report = control_domain(kernels, config.number('mu', 1.0), config.number('lambda', 2.0))
    else:
        raise ConfigError(f"Unknown domain type '{kind}'")
    write_json(config.out_dir / 'domain.json', report.to_dict())
    if not report.admissible:
        raise InadmissibleError(f"Weight {report.weight} is outside the {kind} domain "
                                f"(failed {', '.join(report.failed_clauses)})",
                                margin=report.margin, clause=','.join(report.failed_clauses))
    return report.to_dict(), ['domain.json']


def cmd_simulate(config: RunConfig) -> CommandResult:
    """Forward SVIE paths plus the a priori bound check."""
    problem = svie_problem(config.problem)
    ens = config.build_ensemble()
    X = solve_svie(problem, ens)
    bound = apriori_bound(problem, X.values, ens)
    write_csv(config.out_dir / 'X.csv', X.to_frame())
    summary = {'domain': problem.domain().to_dict(), 'apriori': bound.to_dict()}
    write_json(config.out_dir / 'summary.json', summary)
    return summary, ['X.csv', 'summary.json']


def _write_solution(config: RunConfig, sol, derived: bool = False) -> List[str]:
    frames = sol.to_frames()
    write_csv(config.out_dir / 'Y.csv', frames['Y'])
    write_grid(config.out_dir / 'Z.bin', sol.Z, {'name': 'Z', 'grid': config.grid.to_dict(), 'derived': derived})
    return ['Y.csv', 'Z.bin']


def cmd_solve(config: RunConfig) -> CommandResult:
    """Adapted M-solution of a BSVIE with its iteration trace."""
    problem = bsvie_problem(config.problem)
    ens = config.build_ensemble()
    sol = solve_bsvie(problem, ens, config.solver_options())
    outputs = _write_solution(config, sol)
    write_csv(config.out_dir / 'trace.csv', pd.DataFrame(sol.trace))
    summary = {'domain': problem.domain().to_dict(), 'diagnostics': sol.diagnostics(),
               'apriori': apriori_check(sol, problem, ens).to_dict()}
    write_json(config.out_dir / 'solution.json', summary)
    return summary, outputs + ['trace.csv', 'solution.json']


def cmd_duality(config: RunConfig) -> CommandResult:
    """Forward/backward pairing gap for a linear SVIE and its transposed BSVIE."""
    data = config.problem
    spec = linear_svie_spec(data)
    ens = config.build_ensemble()
    report = duality_check(spec, free_term(data.get('phi', 1.0)), free_term(data.get('psi', 1.0)),
                           config.number('mu', 1.0), config.number('eta', 0.0), config.number('lambda', 1.0),
                           ens, diagonal=bool(data.get('diagonal', False)), opts=config.solver_options())
    summary = report.to_dict()
    write_json(config.out_dir / 'duality.json', summary)
    return summary, ['duality.json']


def cmd_voc(config: RunConfig) -> CommandResult:
    """Variation-of-constants solution of a linear BSVIE, compared with the fixed point."""
    spec = linear_bsvie_spec(config.problem)
    ens = config.build_ensemble()
    result = variation_of_constants(spec, free_term(config.problem.get('psi', 1.0)), ens,
                                    compare=bool(config.problem.get('compare', True)),
                                    opts=config.solver_options())
    write_csv(config.out_dir / 'Y.csv', result.Y.to_frame())
    write_grid(config.out_dir / 'Z.bin', result.Z.values,
               {'name': 'Z', 'grid': config.grid.to_dict(), 'derived': result.Z.derived})
    summary = {'series_ratio': spec.series_ratio(), **result.to_dict()}
    write_json(config.out_dir / 'voc.json', summary)
    return summary, ['Y.csv', 'Z.bin', 'voc.json']


def cmd_bsde_reduce(config: RunConfig) -> CommandResult:
    """Solve a BSVIE and check its discounted sums against the reduced BSDE."""
    problem = bsvie_problem(config.problem)
    ens = config.build_ensemble()
    sol = solve_bsvie(problem, ens, config.solver_options())
    reduction = bsvie_to_bsde(sol, problem.lam, config.number('mu', problem.lam / 2.0), ens,
                              include_diagonal=bool(config.problem.get('include_diagonal', False)))
    write_csv(config.out_dir / 'cY.csv', reduction.cY.to_frame())
    write_csv(config.out_dir / 'cZ.csv', reduction.cZ.to_frame())
    summary = {'diagnostics': sol.diagnostics(), **reduction.to_dict()}
    write_json(config.out_dir / 'reduction.json', summary)
    return summary, ['cY.csv', 'cZ.csv', 'reduction.json']


def cmd_optimize(config: RunConfig) -> CommandResult:
    """Projected-gradient search for a stationary control."""
    problem = control_problem(config.problem)
    ens = config.build_ensemble()
    options = {**DEFAULT_OPTIMIZE_OPTIONS, **config.raw.get('optimize', {})}
    u0 = np.broadcast_to(np.asarray(config.problem.get('u0', 0.0), dtype=float).reshape(-1)[:problem.l],
                         (ens.paths, ens.steps + 1, problem.l)).copy()
    result = optimize(problem, u0, ens, OptimizeOptions(float(options['tol']), int(options['max_iter'])))
    paths, nodes = result.control.shape[:2]
    control = pd.DataFrame({'path': np.repeat(np.arange(paths), nodes), 't': np.tile(ens.nodes, paths)})
    for k in range(problem.l):
        control['u' if problem.l == 1 else f"u_{k}"] = result.control[..., k].reshape(-1)
    write_csv(config.out_dir / 'control.csv', control)
    write_csv(config.out_dir / 'trace.csv', result.trace_frame())
    summary = {'status': result.status, 'form': problem.meta.get('form'), **result.report.to_dict()}
    write_json(config.out_dir / 'report.json', summary)
    return summary, ['control.csv', 'trace.csv', 'report.json']


class VolterraApp:
    """Runs one command, records it in the registry and maps failures to exit codes."""

    COMMANDS: Dict[str, Callable[[RunConfig], CommandResult]] = {
        'domain': cmd_domain,
        'simulate-svie': cmd_simulate,
        'solve-bsvie': cmd_solve,
        'check-duality': cmd_duality,
        'voc': cmd_voc,
        'bsde-reduce': cmd_bsde_reduce,
        'optimize': cmd_optimize,
    }

    def __init__(self, registry: Optional[RunRegistry] = None):
        self.registry = registry or RunRegistry()

    def run(self, config: RunConfig) -> int:
        handler = self.COMMANDS[config.command]
        run_id = self.registry.start_run(config.command, config.manifest_config(), config.seed, config.out_dir)
        logger.info(f"Running {config.command} on grid T={config.grid.horizon}, N={config.grid.steps} "
                    f"with {config.ensemble.model} ensemble")
        try:
            summary, outputs = handler(config)
            write_manifest(config.out_dir, config.command, config.manifest_config(), config.seed,
                           config.grid.to_dict(), config.ensemble.to_dict(), config.threads, outputs)
        except Exception as error:
            code = self.handle_error(error)
            self.registry.finish_run(run_id, 'failed', {'error': str(error), 'exit_code': code})
            return code
        self.registry.finish_run(run_id, 'ok', summary)
        logger.info(f"{config.command} finished; artifacts in {config.out_dir}")
        return EXIT_CODES['ok']

    @staticmethod
    def handle_error(error: Exception) -> int:
        """Log the failure and return its exit code."""
        if isinstance(error, (ConfigError, OSError, json.JSONDecodeError)):
            logger.error(f"Configuration or I/O error: {error}")
            return EXIT_CODES['io_error']
        elif isinstance(error, (InadmissibleError, HorizonError)):
            logger.error(f"Inadmissible problem: {error}")
            return EXIT_CODES['inadmissible']
        elif isinstance(error, (ConvergenceError, NonFiniteError)):
            logger.error(f"Solver did not converge: {error}")
            return EXIT_CODES['convergence']
        elif isinstance(error, MemoryBudgetError):
            logger.error(f"Memory budget exceeded: {error}")
            return EXIT_CODES['memory']
        else:
            logger.exception(f"Unexpected error: {error}")
            return EXIT_CODES['unexpected']


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Problem description (JSON)')
    common.add_argument('--out', help='Output directory for artifacts')
    common.add_argument('--seed', type=int, help='Ensemble seed (u64)')
    common.add_argument('--threads', type=int, help='Worker threads')
    common.add_argument('--grid', help='Horizon and steps as T,N')
    common.add_argument('--ensemble', help="'tree' or 'mc:M'")

    parser = argparse.ArgumentParser(prog='volterra', description=__doc__.strip().splitlines()[-1])
    commands = parser.add_subparsers(dest='command', required=True)
    for name, handler in VolterraApp.COMMANDS.items():
        commands.add_parser(name, parents=[common], help=handler.__doc__)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_args(args)
    except Exception as error:
        return VolterraApp.handle_error(error)
    return VolterraApp().run(config)


if __name__ == '__main__':
    sys.exit(main())
