import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv

from drbsde.errors import ConfigError, InvalidArgumentError
from drbsde.utils.generators import CATALOG
from drbsde.utils.payoffs import build_payoff

load_dotenv()


class Config:
    # Weights
    DEFAULT_EPS = float(os.environ.get('DRBSDE_EPS', 1e-4))
    DEFAULT_BETA = float(os.environ.get('DRBSDE_BETA', 6.0))

    # Simulation
    RNG_BLOCK_PATHS = 1024  # paths per counter-based stream
    WORKERS = int(os.environ.get('DRBSDE_WORKERS', min(8, os.cpu_count() or 1)))
    REGRESSION_DEGREE = 3
    LATTICE_SAMPLE_PATHS = 2048  # tree paths for path functionals (sup-norm, K, crossings)

    # Backward step
    INNER_TOL = 1e-15
    INNER_MAX_ITER = 500
    PENALTY_STEP_RATIO = 0.5  # grids are refined so that (mu + n) * dt <= this
    DEFAULT_SCHEDULE = (1, 2, 4, 8, 16, 32, 64, 128, 256)

    # Picard
    PICARD_TOL = 1e-8
    PICARD_MAX_ITER = 25

    # Diagnostics
    TOUCH_TOL = 1e-9
    CROSSING_L_MAX = 64
    COMPARISON_TOL = 1e-8

    # Output
    OUTPUT_FOLDER = os.environ.get('DRBSDE_OUTPUT_FOLDER', 'output')
    LOG_LEVEL = os.environ.get('DRBSDE_LOG_LEVEL', 'INFO')

    BACKENDS = ('lattice', 'regression')
    SOLVERS = ('bsde', 'penalized', 'clamped', 'picard')
    LOWER_MODES = ('penalize', 'clamp')
    MEASURES = ('risk_neutral', 'physical')
    OUTPUT_FORMATS = ('json', 'csv')


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class ProblemSection:
    terminal: Dict[str, Any]
    generator: str = 'zero'
    params: Dict[str, Any] = field(default_factory=dict)
    lower: Optional[Dict[str, Any]] = None
    upper: Optional[Dict[str, Any]] = None
    strict_separation: bool = False


@dataclass(frozen=True)
class MarketSection:
    s0: float = 100.0
    r: float = 0.0
    theta: float = 0.0
    sigma: float = 0.2


@dataclass(frozen=True)
class GridSection:
    T: float = 1.0
    N: int = 50


@dataclass(frozen=True)
class WeightsSection:
    # None means: take the generator's declared envelope
    mu: Optional[float] = None
    gamma: Optional[float] = None
    eps: float = Config.DEFAULT_EPS
    beta: float = Config.DEFAULT_BETA


@dataclass(frozen=True)
class EngineSection:
    backend: str = 'lattice'
    solver: str = 'clamped'
    penalty: int = 64
    schedule: Tuple[int, ...] = Config.DEFAULT_SCHEDULE
    lower_mode: str = 'penalize'
    degree: int = Config.REGRESSION_DEGREE
    picard_tol: float = Config.PICARD_TOL
    picard_max_iter: int = Config.PICARD_MAX_ITER
    measure: str = 'risk_neutral'


@dataclass(frozen=True)
class SimulationSection:
    n_paths: int = 10000
    seed: int = 0
    d: int = 1


@dataclass(frozen=True)
class OutputSection:
    directory: str = Config.OUTPUT_FOLDER
    formats: Tuple[str, ...] = Config.OUTPUT_FORMATS


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSection
    grid: GridSection = field(default_factory=GridSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    engine: EngineSection = field(default_factory=EngineSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    output: OutputSection = field(default_factory=OutputSection)
    market: Optional[MarketSection] = None
    compare: Optional[ProblemSection] = None

    def with_overrides(self, out: Optional[str] = None, seed: Optional[int] = None) -> 'RunConfig':
        """Apply the --out / --seed command-line overrides."""
        output = self.output if out is None else OutputSection(out, self.output.formats)
        simulation = self.simulation if seed is None else SimulationSection(
            self.simulation.n_paths, _check_seed(seed, 'seed'), self.simulation.d
        )
        return RunConfig(self.problem, self.grid, self.weights, self.engine, simulation,
                         output, self.market, self.compare)


def load_run_config(path: str) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    Raises:
        ConfigError: with the JSON line for syntax errors, or the dotted
            field path for validation errors
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from exc
    return parse_run_config(raw)


def parse_run_config(raw: Any) -> RunConfig:
    """Validate an already-decoded configuration mapping."""
    root = _mapping(raw, '')
    _known(root, '', {'problem', 'market', 'grid', 'weights', 'engine', 'simulation', 'output', 'compare'})
    if 'problem' not in root:
        raise ConfigError("missing section", field='problem')

    problem = _parse_problem(root['problem'], 'problem')
    compare = _parse_problem(root['compare'], 'compare') if root.get('compare') is not None else None
    market = _parse_market(root['market']) if root.get('market') is not None else None
    grid = _parse_grid(root.get('grid', {}))
    weights = _parse_weights(root.get('weights', {}))
    engine = _parse_engine(root.get('engine', {}))
    simulation = _parse_simulation(root.get('simulation', {}))
    output = _parse_output(root.get('output', {}))

    if engine.backend == 'lattice' and simulation.d != 1:
        raise ConfigError("the lattice backend is one-dimensional", field='simulation.d')
    if market is not None and simulation.d != 1:
        raise ConfigError("market problems use a single Brownian motion", field='simulation.d')
    if engine.measure == 'physical' and (market is None or engine.backend != 'regression'):
        raise ConfigError("physical-measure pricing needs a market and the regression backend",
                          field='engine.measure')
    return RunConfig(problem, grid, weights, engine, simulation, output, market, compare)


# ---- section parsers --------------------------------------------------------

def _parse_problem(raw: Any, where: str) -> ProblemSection:
    section = _mapping(raw, where)
    _known(section, where, {'terminal', 'generator', 'params', 'lower', 'upper', 'strict_separation'})
    if 'terminal' not in section:
        raise ConfigError("missing terminal payoff", field=f'{where}.terminal')
    terminal = _payoff(section['terminal'], f'{where}.terminal')
    generator = section.get('generator', 'zero')
    if generator not in CATALOG:
        raise ConfigError(f"unknown generator '{generator}'; choose from {sorted(CATALOG)}",
                          field=f'{where}.generator')
    params = _mapping(section.get('params', {}), f'{where}.params')
    lower = _payoff(section['lower'], f'{where}.lower') if section.get('lower') is not None else None
    upper = _payoff(section['upper'], f'{where}.upper') if section.get('upper') is not None else None
    strict = section.get('strict_separation', False)
    if not isinstance(strict, bool):
        raise ConfigError("expected true/false", field=f'{where}.strict_separation')
    return ProblemSection(terminal, generator, dict(params), lower, upper, strict)


def _parse_market(raw: Any) -> MarketSection:
    section = _mapping(raw, 'market')
    _known(section, 'market', {'s0', 'r', 'theta', 'sigma'})
    s0 = _number(section.get('s0', 100.0), 'market.s0', low=0.0, strict=True)
    r = _number(section.get('r', 0.0), 'market.r')
    theta = _number(section.get('theta', 0.0), 'market.theta')
    sigma = _number(section.get('sigma', 0.2), 'market.sigma', low=0.0, strict=True)
    return MarketSection(s0, r, theta, sigma)


def _parse_grid(raw: Any) -> GridSection:
    section = _mapping(raw, 'grid')
    _known(section, 'grid', {'T', 'N'})
    T = _number(section.get('T', 1.0), 'grid.T', low=0.0, strict=True)
    N = _integer(section.get('N', 50), 'grid.N', low=1)
    return GridSection(T, N)


def _parse_weights(raw: Any) -> WeightsSection:
    section = _mapping(raw, 'weights')
    _known(section, 'weights', {'mu', 'gamma', 'eps', 'beta'})
    mu = section.get('mu')
    gamma = section.get('gamma')
    return WeightsSection(
        mu=None if mu is None else _number(mu, 'weights.mu', low=0.0),
        gamma=None if gamma is None else _number(gamma, 'weights.gamma', low=0.0),
        eps=_number(section.get('eps', Config.DEFAULT_EPS), 'weights.eps', low=0.0, strict=True),
        beta=_number(section.get('beta', Config.DEFAULT_BETA), 'weights.beta', low=0.0),
    )


def _parse_engine(raw: Any) -> EngineSection:
    section = _mapping(raw, 'engine')
    _known(section, 'engine', {'backend', 'solver', 'penalty', 'schedule', 'lower_mode', 'degree',
                               'picard', 'measure'})
    backend = _choice(section.get('backend', 'lattice'), 'engine.backend', Config.BACKENDS)
    solver = _choice(section.get('solver', 'clamped'), 'engine.solver', Config.SOLVERS)
    lower_mode = _choice(section.get('lower_mode', 'penalize'), 'engine.lower_mode', Config.LOWER_MODES)
    measure = _choice(section.get('measure', 'risk_neutral'), 'engine.measure', Config.MEASURES)
    penalty = _integer(section.get('penalty', 64), 'engine.penalty', low=0)
    degree = _integer(section.get('degree', Config.REGRESSION_DEGREE), 'engine.degree', low=0)

    schedule_raw = section.get('schedule', list(Config.DEFAULT_SCHEDULE))
    if not isinstance(schedule_raw, list) or not schedule_raw:
        raise ConfigError("expected a non-empty list of penalty levels", field='engine.schedule')
    schedule = tuple(_integer(v, f'engine.schedule[{k}]', low=1) for k, v in enumerate(schedule_raw))
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("penalty levels must be strictly increasing", field='engine.schedule')

    picard = _mapping(section.get('picard', {}), 'engine.picard')
    _known(picard, 'engine.picard', {'tol', 'max_iter'})
    picard_tol = _number(picard.get('tol', Config.PICARD_TOL), 'engine.picard.tol', low=0.0, strict=True)
    picard_max_iter = _integer(picard.get('max_iter', Config.PICARD_MAX_ITER), 'engine.picard.max_iter', low=1)
    return EngineSection(backend, solver, penalty, schedule, lower_mode, degree,
                         picard_tol, picard_max_iter, measure)


def _parse_simulation(raw: Any) -> SimulationSection:
    section = _mapping(raw, 'simulation')
    _known(section, 'simulation', {'n_paths', 'seed', 'd'})
    n_paths = _integer(section.get('n_paths', 10000), 'simulation.n_paths', low=1)
    seed = _check_seed(section.get('seed', 0), 'simulation.seed')
    d = _integer(section.get('d', 1), 'simulation.d', low=1)
    return SimulationSection(n_paths, seed, d)


def _parse_output(raw: Any) -> OutputSection:
    section = _mapping(raw, 'output')
    _known(section, 'output', {'directory', 'formats'})
    directory = section.get('directory', Config.OUTPUT_FOLDER)
    if not isinstance(directory, str) or not directory:
        raise ConfigError("expected a directory path", field='output.directory')
    formats = section.get('formats', list(Config.OUTPUT_FORMATS))
    if not isinstance(formats, list) or any(f not in Config.OUTPUT_FORMATS for f in formats):
        raise ConfigError(f"formats must be a list drawn from {list(Config.OUTPUT_FORMATS)}",
                          field='output.formats')
    return OutputSection(directory, tuple(formats))


# ---- field helpers ----------------------------------------------------------

def _mapping(raw: Any, where: str) -> Mapping[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", field=where or None)
    return raw


def _known(section: Mapping[str, Any], where: str, allowed) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        prefix = f'{where}.' if where else ''
        raise ConfigError("unknown key", field=f'{prefix}{unknown[0]}')


def _number(raw: Any, where: str, low: Optional[float] = None, strict: bool = False) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError("expected a number", field=where)
    value = float(raw)
    if low is not None and (value < low or (strict and value == low)):
        bound = '>' if strict else '>='
        raise ConfigError(f"must be {bound} {low:g}", field=where)
    return value


def _integer(raw: Any, where: str, low: Optional[int] = None) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError("expected an integer", field=where)
    if low is not None and raw < low:
        raise ConfigError(f"must be >= {low}", field=where)
    return raw


def _choice(raw: Any, where: str, options) -> str:
    if raw not in options:
        raise ConfigError(f"expected one of {list(options)}", field=where)
    return raw


def _check_seed(raw: Any, where: str) -> int:
    seed = _integer(raw, where, low=0)
    if seed >= 2 ** 64:
        raise ConfigError("seed must fit in 64 bits", field=where)
    return seed


def _payoff(raw: Any, where: str) -> Dict[str, Any]:
    spec = dict(_mapping(raw, where))
    try:
        build_payoff(spec)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=where) from exc
    return spec
