"""
Run Service Module

Turns a validated RunConfig into engine objects, runs one command and
hands the records to the ResultsStore.

Commands:
- solve: one solver run, summary.json + series.csv
- converge: penalization convergence study, convergence.csv + summary.json
- compare: two problems under shared noise, comparison.json
- price: game option price against the tree oracle, price.json
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

from drbsde.config import MarketSection, ProblemSection, RunConfig
from drbsde.errors import ConfigError, DRBSDEError, InvalidArgumentError
from drbsde.models import MarketSpec, ProblemData, SolutionBundle, TimeGrid, WeightProfile
from drbsde.services.core_service import beta_norms, build_grid, weights_for_problem
from drbsde.services.diagnostics_service import (
    apriori_ratio,
    comparison_check,
    convergence_study,
    skorokhod_residual,
)
from drbsde.services.expectation_service import ExpectationBackend, build_backend
from drbsde.services.game_option_service import ENGINES, GameSpec, price_game_option
from drbsde.services.results_service import ResultsStore
from drbsde.services.solver_service import (
    PenaltySchedule,
    PicardConfig,
    picard_solve,
    solve_bsde,
    solve_clamped,
    solve_penalized,
)
from drbsde.utils.generators import build_generator
from drbsde.utils.payoffs import build_payoff

logger = logging.getLogger(__name__)


# =============================================================================
# CONSTANTS
# =============================================================================

class Command(str, Enum):
    """Commands of the command-line front end."""
    SOLVE = 'solve'
    CONVERGE = 'converge'
    COMPARE = 'compare'
    PRICE = 'price'


class RunStatus(str, Enum):
    """Run job status states."""
    PENDING = 'pending'
    RUNNING = 'running'
    COMPLETED = 'completed'
    ERROR = 'error'


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass
class RunJob:
    """One command run with its configuration and outcome."""
    command: Command
    config: RunConfig
    status: str = RunStatus.PENDING.value
    error: Optional[str] = None
    error_type: Optional[str] = None
    outputs: List[str] = field(default_factory=list)
    record: Dict[str, Any] = field(default_factory=dict)

    def error_record(self) -> Dict[str, Any]:
        return {'error': self.error_type, 'message': self.error, 'command': self.command.value}


# =============================================================================
# BUILDERS
# =============================================================================

def build_market(section: Optional[MarketSection]) -> Optional[MarketSpec]:
    if section is None:
        return None
    return MarketSpec(s0=section.s0, r=section.r, theta=section.theta, sigma=section.sigma)


def build_problem(section: ProblemSection, grid: TimeGrid, name: str = 'problem') -> ProblemData:
    """ProblemData from a configured problem section."""
    terminal = build_payoff(section.terminal)
    try:
        generator = build_generator(section.generator, section.params, grid.nodes)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field=f"{name}.params") from exc
    return ProblemData(
        terminal=terminal.terminal,
        generator=generator,
        lower=build_payoff(section.lower) if section.lower is not None else None,
        upper=build_payoff(section.upper) if section.upper is not None else None,
        strict_separation=section.strict_separation,
        name=name,
    )


def build_weights(config: RunConfig, problem: ProblemData, grid: TimeGrid) -> WeightProfile:
    section = config.weights
    return weights_for_problem(problem, grid, eps=section.eps, beta=section.beta,
                               mu=section.mu, gamma=section.gamma)


def backend_factory(config: RunConfig) -> Callable[[TimeGrid], ExpectationBackend]:
    """Backend builder for any grid, with the configured simulation settings."""
    market = build_market(config.market)
    engine, simulation = config.engine, config.simulation

    def factory(grid: TimeGrid) -> ExpectationBackend:
        return build_backend(
            engine.backend, grid, market,
            n_paths=simulation.n_paths, seed=simulation.seed, d=simulation.d,
            degree=engine.degree, risk_neutral=engine.measure != 'physical',
        )

    return factory


def solve_configured(config: RunConfig, problem: ProblemData, backend: ExpectationBackend,
                     grid: TimeGrid, w: WeightProfile) -> SolutionBundle:
    """Run the configured solver."""
    engine = config.engine
    if engine.solver == 'bsde':
        return solve_bsde(problem, backend, grid, w)
    if engine.solver == 'penalized':
        return solve_penalized(problem, engine.penalty, backend, grid, w, engine.lower_mode)
    if engine.solver == 'clamped':
        return solve_clamped(problem, backend, grid, w)
    cfg = PicardConfig(tol=engine.picard_tol, max_iter=engine.picard_max_iter, beta=w.beta)
    sol, _ = picard_solve(problem, cfg, backend, grid, w)
    return sol


# =============================================================================
# COMMANDS
# =============================================================================

def run(command: Command, config: RunConfig) -> RunJob:
    """
    Run one command and write its artifacts.

    Returns:
        The completed RunJob

    Raises:
        DRBSDEError: after the job is marked as failed and error.json written
    """
    command = Command(command)
    job = RunJob(command=command, config=config)
    store = ResultsStore(config.output.directory)
    handler = _HANDLERS[command]

    job.status = RunStatus.RUNNING.value
    logger.info("Running %s (backend=%s, solver=%s, seed=%d)", command.value,
                config.engine.backend, config.engine.solver, config.simulation.seed)
    try:
        job.record, job.outputs = handler(config, store)
    except DRBSDEError as exc:
        job.status = RunStatus.ERROR.value
        job.error = str(exc)
        job.error_type = type(exc).__name__
        logger.error("%s failed: %s", command.value, exc)
        store.save_error(job.error_record())
        raise
    job.status = RunStatus.COMPLETED.value
    logger.info("%s completed: %s", command.value, ", ".join(job.outputs))
    return job


def _run_solve(config: RunConfig, store: ResultsStore) -> Tuple[Dict[str, Any], List[str]]:
    grid = build_grid(config.grid.T, config.grid.N)
    problem = build_problem(config.problem, grid)
    w = build_weights(config, problem, grid)
    backend = backend_factory(config)(grid)
    sol = solve_configured(config, problem, backend, grid, w)

    record = {
        'command': Command.SOLVE.value,
        'y0': sol.y0,
        'norms': beta_norms(sol, w, grid).to_dict(),
        'residuals': skorokhod_residual(sol, problem, grid).to_dict(),
        'apriori_ratio': apriori_ratio(sol, problem, w, grid),
        'meta': sol.meta,
        **_run_header(config),
    }
    outputs = _write(store, config, json_files={'summary': record}, series=sol.series())
    return record, outputs


def _run_converge(config: RunConfig, store: ResultsStore) -> Tuple[Dict[str, Any], List[str]]:
    grid = build_grid(config.grid.T, config.grid.N)
    problem = build_problem(config.problem, grid)
    if not problem.has_barriers:
        raise ConfigError("a convergence study needs at least one barrier", field='problem.lower')
    w = build_weights(config, problem, grid)
    report = convergence_study(problem, PenaltySchedule(config.engine.schedule), backend_factory(config),
                               grid, w, config.engine.lower_mode)

    summary = {key: value for key, value in report.to_dict().items() if key != 'levels'}
    record = {'command': Command.CONVERGE.value, **summary, **_run_header(config)}
    outputs = _write(store, config, json_files={'summary': record}, convergence=report.to_frame())
    return record, outputs


def _run_compare(config: RunConfig, store: ResultsStore) -> Tuple[Dict[str, Any], List[str]]:
    if config.compare is None:
        raise ConfigError("compare needs a second problem", field='compare')
    grid = build_grid(config.grid.T, config.grid.N)
    problem_a = build_problem(config.problem, grid, name='problem')
    problem_b = build_problem(config.compare, grid, name='compare')
    # Both solves share one backend: same paths, same noise
    backend = backend_factory(config)(grid)
    sol_a = solve_configured(config, problem_a, backend, grid, build_weights(config, problem_a, grid))
    sol_b = solve_configured(config, problem_b, backend, grid, build_weights(config, problem_b, grid))
    single_lower = all(p.lower is not None and p.upper is None for p in (problem_a, problem_b))
    result = comparison_check(sol_a, sol_b, check_k=single_lower)

    record = {
        'command': Command.COMPARE.value,
        'y0_problem': sol_a.y0,
        'y0_compare': sol_b.y0,
        **result.to_dict(),
        **_run_header(config),
    }
    outputs = _write(store, config, json_files={'comparison': record})
    return record, outputs


def _run_price(config: RunConfig, store: ResultsStore) -> Tuple[Dict[str, Any], List[str]]:
    market = build_market(config.market)
    if market is None:
        raise ConfigError("pricing needs a market section", field='market')
    engine = config.engine
    if engine.solver not in ENGINES:
        raise ConfigError(f"pricing engines are {list(ENGINES)}", field='engine.solver')
    section = config.problem
    # The driver is the market discounting of the chosen measure
    if section.generator != 'zero' or section.params:
        field_name = 'problem.generator' if section.generator != 'zero' else 'problem.params'
        raise ConfigError("pricing sets its own discounting generator from the market section",
                          field=field_name)
    if section.strict_separation:
        raise ConfigError("pricing allows touching payoffs; drop strict_separation",
                          field='problem.strict_separation')
    spec = GameSpec(
        market=market,
        terminal=build_payoff(section.terminal),
        lower=build_payoff(section.lower) if section.lower is not None else None,
        upper=build_payoff(section.upper) if section.upper is not None else None,
    )
    grid = build_grid(config.grid.T, config.grid.N)
    backend = backend_factory(config)(grid)
    w = build_weights(config, spec.to_problem(grid, engine.measure), grid)
    picard = PicardConfig(tol=engine.picard_tol, max_iter=engine.picard_max_iter, beta=w.beta) \
        if engine.solver == 'picard' else None
    price = price_game_option(spec, engine.solver, grid, backend, w, penalty=engine.penalty,
                              lower_mode=engine.lower_mode, picard=picard, measure=engine.measure)

    record = {'command': Command.PRICE.value, **price.to_dict(), **_run_header(config)}
    outputs = _write(store, config, json_files={'price': record})
    return record, outputs


def _run_header(config: RunConfig) -> Dict[str, Any]:
    return {
        'backend': config.engine.backend,
        'solver': config.engine.solver,
        'grid': {'T': config.grid.T, 'N': config.grid.N},
        'seed': config.simulation.seed,
        'n_paths': config.simulation.n_paths if config.engine.backend == 'regression' else None,
    }


def _write(store: ResultsStore, config: RunConfig, json_files: Dict[str, Dict[str, Any]],
           series=None, convergence=None) -> List[str]:
    formats = config.output.formats
    outputs: List[str] = []
    if 'json' in formats:
        savers = {'summary': store.save_summary, 'comparison': store.save_comparison, 'price': store.save_price}
        for kind, record in json_files.items():
            outputs.append(savers[kind](record))
    if 'csv' in formats:
        if series is not None:
            outputs.append(store.save_series(series))
        if convergence is not None:
            outputs.append(store.save_convergence(convergence))
    return outputs


_HANDLERS = {
    Command.SOLVE: _run_solve,
    Command.CONVERGE: _run_converge,
    Command.COMPARE: _run_compare,
    Command.PRICE: _run_price,
}
