"""
Expectation Service Module

Conditional expectations E[. | F_{t_i}] for the backward solvers.

Two backends share one interface:
- LatticeBackend: recombining binomial tree, exact one-step expectations
  under the tree probabilities (one dimension only)
- RegressionBackend: least-squares Monte Carlo on simulated paths with a
  total-degree polynomial basis in the state
"""

from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from drbsde.config import Config
from drbsde.errors import InvalidArgumentError, UnderdeterminedRegressionError
from drbsde.models import MarketSpec, StateLayout, TimeGrid
from drbsde.services.paths_service import MarketPaths, PathEnsemble, simulate_brownian, simulate_market

logger = logging.getLogger(__name__)


# =============================================================================
# LATTICE
# =============================================================================

@dataclass(frozen=True, eq=False)
class Lattice:
    """
    Recombining binomial tree over a uniform grid.

    Node j of level i (0 <= j <= i) is reached by j up-moves. For a market
    tree the state is S_{i,j} = S0 * u^j * d^(i-j); for a Brownian tree it is
    B_{i,j} = (2j - i) * sqrt(dt). probs[i] is the up-probability of step i.
    """
    grid: TimeGrid
    states: np.ndarray
    probs: np.ndarray
    rates: np.ndarray
    kind: str = "market"

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def level(self, i: int) -> np.ndarray:
        """States of the i + 1 nodes of level i."""
        return self.states[i, :i + 1]

    def mask(self) -> np.ndarray:
        levels = np.arange(self.n_steps + 1)
        return levels[None, :] <= levels[:, None]

    def reach_probabilities(self) -> np.ndarray:
        """Probability of each node within its level, shape (N+1, N+1)."""
        n = self.n_steps
        reach = np.zeros((n + 1, n + 1))
        reach[0, 0] = 1.0
        for i in range(n):
            p = self.probs[i]
            reach[i + 1, :i + 1] += (1.0 - p) * reach[i, :i + 1]
            reach[i + 1, 1:i + 2] += p * reach[i, :i + 1]
        return reach

    def sample_paths(self, n_paths: int, seed: int = 0) -> np.ndarray:
        """Column indices visited by n_paths tree paths, shape (n_paths, N+1)."""
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        ups = rng.random((n_paths, self.n_steps)) < self.probs[None, :]
        paths = np.zeros((n_paths, self.n_steps + 1), dtype=np.int64)
        np.cumsum(ups, axis=1, out=paths[:, 1:])
        return paths

    def layout(self, sample_paths: Optional[int] = None, seed: int = 0) -> StateLayout:
        mask = self.mask()
        return StateLayout(
            kind="lattice",
            times=self.grid.nodes,
            states=np.where(mask, self.states, 0.0),
            mask=mask,
            weights=self.reach_probabilities(),
            paths=self.sample_paths(sample_paths or Config.LATTICE_SAMPLE_PATHS, seed),
        )


def build_lattice(grid: TimeGrid, market: Optional[MarketSpec] = None) -> Lattice:
    """
    Build a binomial tree on a uniform grid.

    Args:
        grid: Uniform time grid
        market: Black-Scholes market; None builds a Brownian tree (p = 1/2)

    Returns:
        Lattice whose up-probabilities are risk-neutral for the market

    Raises:
        InvalidArgumentError: non-uniform grid, zero volatility, or a
            risk-neutral probability outside [0, 1]
    """
    if not grid.is_uniform:
        raise InvalidArgumentError("the lattice backend needs a uniform grid")
    n = grid.n_steps
    dt = float(grid.steps[0])
    moves = 2.0 * np.arange(n + 1)[None, :] - np.arange(n + 1)[:, None]

    if market is None:
        h = np.sqrt(dt)
        return Lattice(grid=grid, states=moves * h, probs=np.full(n, 0.5), rates=np.zeros(n + 1),
                       kind="brownian")

    r, _, sigma = market.curves(grid)
    if np.any(sigma <= 0):
        raise InvalidArgumentError("the lattice needs a positive volatility")
    # Level-average volatility keeps the tree recombining
    sigma_bar = float(np.mean(sigma[:-1]))
    h = sigma_bar * np.sqrt(dt)
    up, down = np.exp(h), np.exp(-h)
    probs = (np.exp(r[:-1] * dt) - down) / (up - down)
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise InvalidArgumentError(
            "risk-neutral probability outside [0, 1]; refine the grid or lower the rate"
        )
    states = market.s0 * np.exp(moves * h)
    logger.debug("Built lattice N=%d sigma_bar=%.6g p in [%.6g, %.6g]", n, sigma_bar,
                 probs.min(), probs.max())
    return Lattice(grid=grid, states=states, probs=probs, rates=r, kind="market")


# =============================================================================
# REGRESSION BASIS
# =============================================================================

@dataclass
class RegressionBasis:
    """
    Polynomial basis in the (standardized) transformed state.

    transform:     'log' (market states) or 'identity' (Brownian states)
    degree:        total polynomial degree
    coefficients:  fitted coefficients per step, filled by the backend
    """
    transform: str
    degree: int
    d: int = 1
    coefficients: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.transform not in ("log", "identity"):
            raise InvalidArgumentError(f"unknown state transform '{self.transform}'")
        if self.degree < 0:
            raise InvalidArgumentError("basis degree must be nonnegative")
        self.exponents: List[Tuple[int, ...]] = [
            alpha for alpha in itertools.product(range(self.degree + 1), repeat=self.d)
            if sum(alpha) <= self.degree
        ]
        self.exponents.sort(key=lambda alpha: (sum(alpha), tuple(-a for a in alpha)))

    @property
    def size(self) -> int:
        return len(self.exponents)

    def design(self, states: np.ndarray) -> np.ndarray:
        """Design matrix (P, size) of one level's states (P,) or (P, d)."""
        x = np.asarray(states, dtype=float).reshape(len(states), -1)
        if self.transform == "log":
            x = np.log(x)
        spread = x.std(axis=0)
        # Directions with no spread (e.g. t = 0) only get the constant
        live = spread > 1e-12 * np.maximum(1.0, np.abs(x.mean(axis=0)))
        z = np.zeros_like(x)
        z[:, live] = (x[:, live] - x[:, live].mean(axis=0)) / spread[live]
        columns = []
        for alpha in self.exponents:
            if any(a > 0 and not live[k] for k, a in enumerate(alpha)):
                continue
            columns.append(np.prod(z ** np.asarray(alpha), axis=1))
        return np.column_stack(columns)


# =============================================================================
# BACKENDS
# =============================================================================

class ExpectationBackend(ABC):
    """One-step conditional expectations on a fixed state layout."""

    grid: TimeGrid
    layout: StateLayout
    d: int
    pathwise: bool = False

    @abstractmethod
    def condexp(self, next_values: np.ndarray, step: int) -> np.ndarray:
        """E[V_{i+1} | F_{t_i}] on level ``step``, shape (M,)."""

    @abstractmethod
    def condexp_with_z(self, next_values: np.ndarray, step: int) -> Tuple[np.ndarray, np.ndarray]:
        """(E[V_{i+1}], E[V_{i+1} dB_i] / dt_i) on level ``step``; Z has shape (M, d)."""

    def martingale_increment(self, z: np.ndarray, step: int) -> np.ndarray:
        """Z_i . dB_i per state of level ``step``; only pathwise backends have one."""
        raise InvalidArgumentError(f"{type(self).__name__} has no sampled increments")

    def _check(self, next_values: np.ndarray, step: int) -> np.ndarray:
        if not 0 <= step < self.grid.n_steps:
            raise InvalidArgumentError(f"step {step} outside 0..{self.grid.n_steps - 1}")
        values = np.asarray(next_values, dtype=float)
        if values.shape != (self.layout.width,):
            raise InvalidArgumentError(
                f"next values have shape {values.shape}, expected ({self.layout.width},)"
            )
        return values


class LatticeBackend(ExpectationBackend):
    """Exact tree expectations."""

    name = "lattice"

    def __init__(self, lattice: Lattice, sample_paths: Optional[int] = None, seed: int = 0):
        self.lattice = lattice
        self.grid = lattice.grid
        self.layout = lattice.layout(sample_paths, seed)
        self.d = 1

    def condexp(self, next_values: np.ndarray, step: int) -> np.ndarray:
        v = self._check(next_values, step)
        p = self.lattice.probs[step]
        out = np.zeros_like(v)
        out[:step + 1] = p * v[1:step + 2] + (1.0 - p) * v[:step + 1]
        return out

    def condexp_with_z(self, next_values: np.ndarray, step: int) -> Tuple[np.ndarray, np.ndarray]:
        v = self._check(next_values, step)
        p = self.lattice.probs[step]
        dt = self.grid.steps[step]
        expect = np.zeros_like(v)
        z = np.zeros((v.size, 1))
        v_up, v_down = v[1:step + 2], v[:step + 1]
        expect[:step + 1] = p * v_up + (1.0 - p) * v_down
        # Covariance with the unit-variance tree noise, per unit of time
        z[:step + 1, 0] = (v_up - v_down) * np.sqrt(p * (1.0 - p) / dt)
        return expect, z


class RegressionBackend(ExpectationBackend):
    """
    Least-squares Monte Carlo.

    At step i, E[V_{i+1}] and E[V_{i+1} dB_i] are projected together onto the
    basis evaluated at the step-i states, in one least-squares solve.
    """

    name = "regression"
    pathwise = True

    def __init__(self, grid: TimeGrid, paths: PathEnsemble,
                 market_paths: Optional[MarketPaths] = None,
                 degree: int = Config.REGRESSION_DEGREE):
        if paths.increments.shape[0] != grid.n_steps:
            raise InvalidArgumentError("paths were simulated on a different grid")
        self.grid = grid
        self.paths = paths
        self.market_paths = market_paths
        self.d = paths.d

        if market_paths is not None:
            if self.d != 1:
                raise InvalidArgumentError("market regression is one-dimensional")
            states = market_paths.s
            transform = "log"
        else:
            brownian = paths.brownian()
            states = brownian[:, :, 0] if self.d == 1 else brownian
            transform = "identity"

        self.basis = RegressionBasis(transform=transform, degree=int(degree), d=self.d)
        if paths.n_paths < self.basis.size:
            raise UnderdeterminedRegressionError(
                f"{paths.n_paths} paths cannot fit {self.basis.size} basis functions"
            )
        n_paths = paths.n_paths
        self.layout = StateLayout(
            kind="paths",
            times=grid.nodes,
            states=states,
            mask=np.ones((grid.n_steps + 1, n_paths), dtype=bool),
            weights=np.full((grid.n_steps + 1, n_paths), 1.0 / n_paths),
        )
        self._designs: Dict[int, np.ndarray] = {}

    def design(self, step: int) -> np.ndarray:
        if step not in self._designs:
            self._designs[step] = self.basis.design(self.layout.states[step])
        return self._designs[step]

    def _fit(self, targets: np.ndarray, step: int) -> np.ndarray:
        X = self.design(step)
        coef, *_ = np.linalg.lstsq(X, targets, rcond=None)
        self.basis.coefficients[step] = coef
        return X @ coef

    def condexp(self, next_values: np.ndarray, step: int) -> np.ndarray:
        v = self._check(next_values, step)
        return self._fit(v, step)

    def martingale_increment(self, z: np.ndarray, step: int) -> np.ndarray:
        return np.einsum("pd,pd->p", np.asarray(z, dtype=float).reshape(self.layout.width, self.d),
                         self.paths.increments[step])

    def condexp_with_z(self, next_values: np.ndarray, step: int) -> Tuple[np.ndarray, np.ndarray]:
        v = self._check(next_values, step)
        dB = self.paths.increments[step]
        targets = np.column_stack([v, v[:, None] * dB])
        fitted = self._fit(targets, step)
        return fitted[:, 0], fitted[:, 1:] / self.grid.steps[step]


def condexp(backend: ExpectationBackend, next_values: np.ndarray, step: int) -> np.ndarray:
    """E[next_values | F_{t_step}] with the given backend."""
    return backend.condexp(next_values, step)


def build_backend(kind: str, grid: TimeGrid, market: Optional[MarketSpec] = None,
                  n_paths: int = 10000, seed: int = 0, d: int = 1,
                  degree: int = Config.REGRESSION_DEGREE,
                  risk_neutral: bool = True) -> ExpectationBackend:
    """
    Build a backend by name.

    Args:
        kind: 'lattice' or 'regression'
        grid: Time grid
        market: Market for asset-driven problems, None for Brownian states
        n_paths, seed, d: Simulation settings (regression only)
        degree: Basis degree (regression only)
        risk_neutral: Simulate the market without the risk premium

    Returns:
        Prepared ExpectationBackend
    """
    if kind == "lattice":
        if d != 1:
            raise InvalidArgumentError("the lattice backend is one-dimensional")
        return LatticeBackend(build_lattice(grid, market), seed=seed)
    if kind == "regression":
        paths = simulate_brownian(grid, n_paths, d, seed)
        market_paths = None
        if market is not None:
            market_paths = simulate_market(market, paths, grid, risk_neutral=risk_neutral)
        return RegressionBackend(grid, paths, market_paths, degree)
    raise InvalidArgumentError(f"unknown backend '{kind}'; choose from {list(Config.BACKENDS)}")
