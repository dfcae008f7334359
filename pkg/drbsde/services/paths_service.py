"""
Paths Service Module

Brownian increments from counter-based Philox streams and the Black-Scholes
market driven by them.

Paths are generated in fixed blocks of Config.RNG_BLOCK_PATHS paths. Block b
draws from the Philox stream with key ``seed`` and counter word 2 set to b,
so path p depends only on (seed, p): not on the total path count and not on
how many worker threads generate the blocks.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from drbsde.config import Config
from drbsde.errors import InvalidArgumentError
from drbsde.models import MarketSpec, TimeGrid

logger = logging.getLogger(__name__)


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments dB[i, p, k] ~ Normal(0, dt_i), shape (N, n_paths, d)."""
    increments: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.increments.shape[1]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def brownian(self) -> np.ndarray:
        """B[i, p, k] with B_0 = 0, shape (N+1, n_paths, d)."""
        out = np.zeros((self.increments.shape[0] + 1,) + self.increments.shape[1:])
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(frozen=True, eq=False)
class MarketPaths:
    """Asset paths S[i, p] and the coefficient curves they were simulated with."""
    s: np.ndarray
    s0: float
    r: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray


# =============================================================================
# PUBLIC API
# =============================================================================

def simulate_brownian(grid: TimeGrid, n_paths: int, d: int = 1, seed: int = 0,
                      workers: Optional[int] = None) -> PathEnsemble:
    """
    Simulate Brownian increments on the grid.

    Args:
        grid: Time grid
        n_paths: Number of paths, >= 1
        d: Brownian dimension, >= 1
        seed: 64-bit reproducibility key
        workers: Thread count (defaults to Config.WORKERS); does not affect results

    Returns:
        PathEnsemble with increments of shape (N, n_paths, d)
    """
    if isinstance(n_paths, bool) or not isinstance(n_paths, (int, np.integer)) or n_paths < 1:
        raise InvalidArgumentError(f"n_paths must be a positive integer, got {n_paths!r}")
    if isinstance(d, bool) or not isinstance(d, (int, np.integer)) or d < 1:
        raise InvalidArgumentError(f"d must be a positive integer, got {d!r}")
    if not (0 <= int(seed) < 2 ** 64):
        raise InvalidArgumentError("seed must be a 64-bit unsigned integer")

    n_steps = grid.n_steps
    block = Config.RNG_BLOCK_PATHS
    starts = list(range(0, n_paths, block))
    increments = np.empty((n_steps, n_paths, d))
    scale = np.sqrt(grid.steps)[:, None, None]

    def fill(start: int) -> None:
        count = min(block, n_paths - start)
        normals = _block_stream(int(seed), start // block).standard_normal((count, n_steps, d))
        increments[:, start:start + count, :] = normals.transpose(1, 0, 2) * scale

    n_workers = max(1, min(workers or Config.WORKERS, len(starts)))
    if n_workers == 1:
        for start in starts:
            fill(start)
    else:
        with ThreadPoolExecutor(max_workers=n_workers, thread_name_prefix="PathBlock") as pool:
            list(pool.map(fill, starts))

    logger.debug("Simulated %d paths x %d steps x %d dims (seed=%d, %d blocks)",
                 n_paths, n_steps, d, seed, len(starts))
    return PathEnsemble(increments=increments, seed=int(seed))


def simulate_market(market: MarketSpec, paths: PathEnsemble, grid: TimeGrid,
                    risk_neutral: bool = False) -> MarketPaths:
    """
    Log-Euler Black-Scholes paths:

        log S_{i+1} = log S_i + (r_i + theta_i sigma_i - sigma_i^2 / 2) dt_i + sigma_i dB_i

    Args:
        market: Coefficient curves and S0
        paths: Brownian increments (d must be 1)
        grid: The grid the increments were drawn on
        risk_neutral: Drop the risk premium theta (pricing measure)

    Returns:
        MarketPaths with S of shape (N+1, n_paths)
    """
    if paths.d != 1:
        raise InvalidArgumentError("the market is driven by a single Brownian motion (d = 1)")
    if paths.increments.shape[0] != grid.n_steps:
        raise InvalidArgumentError("paths were simulated on a different grid")
    if risk_neutral:
        market = market.risk_neutral()
    r, theta, sigma = market.curves(grid)
    if np.any(sigma < 0):
        raise InvalidArgumentError("volatility must be nonnegative")

    drift = (r + theta * sigma - 0.5 * sigma ** 2)[:-1] * grid.steps
    log_steps = drift[:, None] + sigma[:-1, None] * paths.increments[:, :, 0]
    log_s = np.zeros((grid.n_steps + 1, paths.n_paths))
    np.cumsum(log_steps, axis=0, out=log_s[1:])
    s = market.s0 * np.exp(log_s)
    return MarketPaths(s=s, s0=float(market.s0), r=r, theta=theta, sigma=sigma)


def _block_stream(seed: int, block_index: int) -> np.random.Generator:
    """Philox stream of one path block."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, block_index, 0]))
