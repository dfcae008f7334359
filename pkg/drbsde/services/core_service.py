"""
Core Service Module

Time grids, stochastic Lipschitz weight profiles and the beta-weighted norms
every solver and diagnostic measures solutions with.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from drbsde.config import Config
from drbsde.errors import InvalidArgumentError
from drbsde.models import NormReport, ProblemData, SolutionBundle, TimeGrid, WeightProfile
from drbsde.utils.math_utils import left_endpoint_cumsum, left_endpoint_sum, per_level


# =============================================================================
# GRIDS & WEIGHTS
# =============================================================================

def build_grid(T: float, N: int) -> TimeGrid:
    """
    Uniform grid with N steps of size T / N.

    Args:
        T: Horizon (years), > 0
        N: Number of steps, >= 1

    Returns:
        TimeGrid with nodes 0, T/N, ..., T
    """
    if not (isinstance(T, (int, float)) and T > 0 and np.isfinite(T)):
        raise InvalidArgumentError(f"horizon must be positive, got {T!r}")
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)) or N < 1:
        raise InvalidArgumentError(f"number of steps must be a positive integer, got {N!r}")
    nodes = np.arange(N + 1, dtype=float) * (float(T) / N)
    nodes[-1] = float(T)
    return TimeGrid(nodes)


def accumulate_weights(mu, gamma, eps: float, beta: float, grid: TimeGrid) -> WeightProfile:
    """
    Build a2 = max(mu + gamma^2, eps) and A(t_i) = sum_{j<i} a2(t_j) dt_j.

    Args:
        mu: Rates mu(t_i) >= 0, scalar, per node (N+1,) or per node and state (N+1, M)
        gamma: Rates gamma(t_i) >= 0, same shapes as mu
        eps: Floor for a2, > 0
        beta: Weight exponent, >= 0
        grid: The time grid

    Returns:
        WeightProfile
    """
    if not eps > 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps!r}")
    if not beta >= 0:
        raise InvalidArgumentError(f"beta must be nonnegative, got {beta!r}")
    mu = _per_node(mu, grid, "mu")
    gamma = _per_node(gamma, grid, "gamma")
    if np.any(mu < 0) or np.any(gamma < 0):
        raise InvalidArgumentError("mu and gamma must be nonnegative")
    ndim = max(mu.ndim, gamma.ndim)
    mu, gamma = np.broadcast_arrays(per_level(mu, ndim), per_level(gamma, ndim))
    a_sq = np.maximum(mu + gamma ** 2, eps)
    A = left_endpoint_cumsum(a_sq, grid.steps)
    return WeightProfile(mu=np.array(mu), gamma=np.array(gamma), eps=float(eps), beta=float(beta),
                         a_sq=a_sq, A=A)


def weights_for_problem(problem: ProblemData, grid: TimeGrid,
                        eps: Optional[float] = None, beta: Optional[float] = None,
                        mu: Optional[float] = None, gamma: Optional[float] = None) -> WeightProfile:
    """
    Weight profile from the generator's declared Lipschitz envelope.

    Explicit mu / gamma override the envelope.
    """
    generator = problem.generator
    mu_values = np.array([generator.mu(t) for t in grid.nodes]) if mu is None else mu
    gamma_values = np.array([generator.gamma(t) for t in grid.nodes]) if gamma is None else gamma
    return accumulate_weights(
        mu_values, gamma_values,
        Config.DEFAULT_EPS if eps is None else eps,
        Config.DEFAULT_BETA if beta is None else beta,
        grid,
    )


def _per_node(values, grid: TimeGrid, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.n_steps + 1, float(arr))
    if arr.shape[0] != grid.n_steps + 1 or arr.ndim > 2:
        raise InvalidArgumentError(f"{name} must have one row per grid node")
    return arr


# =============================================================================
# NORMS
# =============================================================================

def beta_norms(sol: SolutionBundle, w: WeightProfile, grid: TimeGrid) -> NormReport:
    """
    beta-weighted norms of (Y, Z), path-averaged.

        sup_norm = E[max_i e^{beta A_i} |Y_i|^2]
        ay_norm  = E[sum_{i<N} e^{beta A_i} a2_i |Y_i|^2 dt_i]
        z_norm   = E[sum_{i<N} e^{beta A_i} |Z_i|^2 dt_i]
    """
    levels = grid.n_steps + 1
    if sol.y.shape[0] != levels or sol.z.shape[:2] != sol.y.shape:
        raise InvalidArgumentError("solution shape does not match the grid")
    if w.A.shape[0] != levels:
        raise InvalidArgumentError("weight profile does not match the grid")
    if w.A.ndim == 2 and w.A.shape[1] != sol.y.shape[1]:
        raise InvalidArgumentError("state-dependent weights do not match the solution width")

    layout = sol.layout
    growth = per_level(w.growth(), 2)
    a_sq = per_level(w.a_sq, 2)
    y_sq = sol.y ** 2
    z_sq = np.sum(sol.z ** 2, axis=2)

    return NormReport(
        sup_norm=layout.expect_max(growth * y_sq),
        ay_norm=left_endpoint_sum(layout.mean(growth * a_sq * y_sq), grid.steps),
        z_norm=left_endpoint_sum(layout.mean(growth * z_sq), grid.steps),
    )


def beta_distance(first: SolutionBundle, second: SolutionBundle, w: WeightProfile,
                  grid: TimeGrid) -> NormReport:
    """Norms of the difference of two solutions on the same layout."""
    return beta_norms(first.difference(second), w, grid)
