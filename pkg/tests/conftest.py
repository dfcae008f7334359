"""Shared grids, backends and problems for the test suite."""

import json

import numpy as np
import pytest

from drbsde.models import MarketSpec, ProblemData, StateLayout
from drbsde.services.core_service import build_grid, weights_for_problem
from drbsde.services.expectation_service import LatticeBackend, build_lattice
from drbsde.services.game_option_service import GameSpec
from drbsde.utils.generators import affine, discounting, zero
from drbsde.utils.payoffs import Payoff

PUT_MARKET = MarketSpec(s0=100.0, r=0.05, sigma=0.2)


def lattice_backend(T=1.0, N=50, market=None, sample_paths=512, seed=0):
    """(grid, backend) on a Brownian tree (market=None) or a market tree."""
    grid = build_grid(T, N)
    return grid, LatticeBackend(build_lattice(grid, market), sample_paths=sample_paths, seed=seed)


def constant(value):
    return Payoff(kind='constant', value=value)


def american_put(grid, strike=100.0, r=0.05):
    put = Payoff(kind='put', strike=strike)
    return ProblemData(terminal=put.terminal, generator=discounting(r, grid.nodes), lower=put,
                       name='american_put')


def flat_problem(grid, terminal=0.0, lower=-1.0, upper=1.0, generator=None):
    """Constant data; with the defaults both barriers stay inactive."""
    return ProblemData(
        terminal=constant(terminal).terminal,
        generator=generator or zero(),
        lower=None if lower is None else constant(lower),
        upper=None if upper is None else constant(upper),
    )


def smooth_band_problem(seed):
    """Linear terminal 2 + s x inside parallel barriers; a random affine driver pushes it out."""
    rng = np.random.default_rng(200 + seed)
    line = Payoff(kind='identity', scale=rng.uniform(-0.5, 0.5), premium=2.0)
    generator = affine(rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))
    return ProblemData(terminal=line.terminal, generator=generator,
                       lower=line.with_premium(-rng.uniform(0.05, 0.3)),
                       upper=line.with_premium(rng.uniform(0.05, 0.3)))


def cancellable_put_family(size=10, seed=7):
    """Cancellable puts on PUT_MARKET with random strikes and premia."""
    rng = np.random.default_rng(seed)
    return [GameSpec.cancellable_put(100.0, rng.uniform(80.0, 120.0), rng.uniform(1.0, 10.0))
            for _ in range(size)]


def paths_layout(grid, n_paths=1, states=None):
    """Monte Carlo layout with the given states (zeros by default)."""
    levels = grid.n_steps + 1
    return StateLayout(
        kind='paths',
        times=grid.nodes,
        states=np.zeros((levels, n_paths)) if states is None else np.asarray(states, dtype=float),
        mask=np.ones((levels, n_paths), dtype=bool),
        weights=np.full((levels, n_paths), 1.0 / n_paths),
    )


def crr_american_put(s0, strike, r, sigma, T, N):
    """Plain Cox-Ross-Rubinstein American put, written independently of the engine."""
    dt = T / N
    u = np.exp(sigma * np.sqrt(dt))
    d = 1.0 / u
    p = (np.exp(r * dt) - d) / (u - d)
    disc = np.exp(-r * dt)
    j = np.arange(N + 1)
    values = np.maximum(strike - s0 * u ** j * d ** (N - j), 0.0)
    for i in range(N - 1, -1, -1):
        j = np.arange(i + 1)
        cont = disc * (p * values[1:i + 2] + (1.0 - p) * values[:i + 1])
        values = np.maximum(strike - s0 * u ** j * d ** (i - j), cont)
    return float(values[0])


@pytest.fixture
def brownian_setup():
    return lattice_backend(T=1.0, N=50)


@pytest.fixture
def put_setup():
    """American put on a 300-step market tree (fine enough for n = 256)."""
    grid, backend = lattice_backend(T=1.0, N=300, market=PUT_MARKET)
    problem = american_put(grid)
    return grid, backend, problem, weights_for_problem(problem, grid)


@pytest.fixture
def game_put():
    return GameSpec.cancellable_put(s0=100.0, strike=100.0, premium=2.0, r=0.05, sigma=0.2)


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration and return its path; output goes under tmp_path."""
    def write(config, name='config.json'):
        config = dict(config)
        config.setdefault('output', {'directory': str(tmp_path / 'out')})
        path = tmp_path / name
        path.write_text(json.dumps(config, indent=2))
        return str(path)
    return write
