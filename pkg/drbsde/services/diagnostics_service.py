"""
Diagnostics Service Module

Measurable counterparts of the reflected-equation theory:
- skorokhod_residual: discrete complementarity sums
- comparison_check: nodewise ordering of two solutions (and of their K)
- apriori_ratio: empirical ratio of the a priori estimate's two sides
- crossing_times: alternating barrier touches along each path
- convergence_study: penalized solutions against the clamped reference
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from drbsde.config import Config
from drbsde.errors import DRBSDEError, InconsistentBarriersError, InvalidArgumentError
from drbsde.models import ProblemData, SolutionBundle, TimeGrid, WeightProfile
from drbsde.services.core_service import accumulate_weights, beta_distance, beta_norms, weights_for_problem
from drbsde.services.expectation_service import ExpectationBackend
from drbsde.services.solver_service import PenaltySchedule, solve_clamped, solve_penalized
from drbsde.utils.math_utils import negative_part, per_level, positive_part

logger = logging.getLogger(__name__)

BackendFactory = Callable[[TimeGrid], ExpectationBackend]


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass(frozen=True)
class SkorokhodResidual:
    lower: float
    upper: float

    def to_dict(self) -> Dict[str, float]:
        return {'lower': self.lower, 'upper': self.upper}


@dataclass(frozen=True)
class ComparisonResult:
    """
    ordered:          Y_A <= Y_B everywhere within tolerance (and K_A >= K_B
                      when reflection ordering was checked)
    worst_violation:  max of Y_A - Y_B over valid nodes (<= 0 when ordered)
    k_violation:      max of K+_B - K+_A, or None when not checked
    """
    ordered: bool
    worst_violation: float
    k_violation: Optional[float] = None
    tol: float = Config.COMPARISON_TOL

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ordered': self.ordered,
            'worst_violation': self.worst_violation,
            'k_violation': self.k_violation,
            'tol': self.tol,
        }


@dataclass
class CrossingTrace:
    """
    touches:     per path, node indices 0 = tau_0 < tau_1 < ... ; odd entries
                 are lower touches (Y <= L), even entries (after 0) upper touches
    stationary:  per path, True when no further touch was found before the cap
    """
    touches: List[List[int]]
    stationary: np.ndarray
    l_max: int = Config.CROSSING_L_MAX

    @property
    def n_paths(self) -> int:
        return len(self.touches)

    def counts(self) -> np.ndarray:
        return np.array([len(t) - 1 for t in self.touches])


@dataclass(frozen=True)
class ConvergenceLevel:
    penalty: int
    upper_violation: float
    upper_violation_expect_max: float
    lower_violation: float
    lower_violation_expect_max: float
    distance: float
    scaled_violation: float
    y0: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n': self.penalty,
            'upper_violation_max': self.upper_violation,
            'upper_violation_expect_max': self.upper_violation_expect_max,
            'lower_violation_max': self.lower_violation,
            'lower_violation_expect_max': self.lower_violation_expect_max,
            'distance': self.distance,
            'scaled_violation': self.scaled_violation,
            'y0': self.y0,
        }


@dataclass
class ConvergenceReport:
    levels: List[ConvergenceLevel] = field(default_factory=list)
    reference_y0: float = 0.0
    refinement: int = 1
    grid_steps: int = 0

    COLUMNS = ('n', 'upper_violation_max', 'upper_violation_expect_max', 'lower_violation_max',
               'lower_violation_expect_max', 'distance', 'scaled_violation', 'y0')

    @property
    def distances(self) -> List[float]:
        return [level.distance for level in self.levels]

    @property
    def distance_nonincreasing(self) -> bool:
        d = self.distances
        return all(b <= a * (1.0 + 1e-9) + 1e-15 for a, b in zip(d, d[1:]))

    @property
    def scaled_violation_bounded(self) -> bool:
        """n * sup violation varies by at most a factor 2 over the last three levels."""
        tail = [level.scaled_violation for level in self.levels[-3:]]
        if len(tail) < 2 or max(tail) == 0.0:
            return True
        if min(tail) == 0.0:
            return False
        return max(tail) / min(tail) <= 2.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([level.to_dict() for level in self.levels], columns=list(self.COLUMNS))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'levels': [level.to_dict() for level in self.levels],
            'reference_y0': self.reference_y0,
            'refinement': self.refinement,
            'grid_steps': self.grid_steps,
            'distance_nonincreasing': self.distance_nonincreasing,
            'scaled_violation_bounded': self.scaled_violation_bounded,
        }


# =============================================================================
# RESIDUALS & COMPARISON
# =============================================================================

def skorokhod_residual(sol: SolutionBundle, problem: ProblemData, grid: TimeGrid) -> SkorokhodResidual:
    """
    Path-averaged sum_i |Y_i - L_i| dK+_i and sum_i |U_i - Y_i| dK-_i.

    Clamped solutions give exactly 0. Penalized solutions sit outside the
    band where they are pushed, so the absolute distance is reported.

    Raises:
        InconsistentBarriersError: reflection recorded against a missing barrier
    """
    layout = sol.layout
    if sol.y.shape[0] != grid.n_steps + 1:
        raise InvalidArgumentError("solution does not match the grid")
    lower = problem.lower_values(layout)
    upper = problem.upper_values(layout)
    pushes_up = np.any(sol.dk_plus[layout.mask] != 0.0)
    pushes_down = np.any(sol.dk_minus[layout.mask] != 0.0)
    if lower is None and pushes_up:
        raise InconsistentBarriersError("K+ increases but the problem has no lower barrier")
    if upper is None and pushes_down:
        raise InconsistentBarriersError("K- increases but the problem has no upper barrier")

    def residual(gap: Optional[np.ndarray], dk: np.ndarray) -> float:
        if gap is None:
            return 0.0
        along = layout.path_view(np.abs(gap) * dk)
        return float(np.mean(np.sum(along[:-1], axis=0)))

    return SkorokhodResidual(
        lower=residual(None if lower is None else sol.y - lower, sol.dk_plus),
        upper=residual(None if upper is None else upper - sol.y, sol.dk_minus),
    )


def comparison_check(sol_a: SolutionBundle, sol_b: SolutionBundle, check_k: bool = False,
                     tol: float = Config.COMPARISON_TOL) -> ComparisonResult:
    """
    Check Y_A <= Y_B at every valid node, and K+_A >= K+_B along every path
    when ``check_k`` is set (single lower barrier comparison).

    Raises:
        InvalidArgumentError: the solutions live on different layouts
    """
    if sol_a.y.shape != sol_b.y.shape or not sol_a.layout.compatible(sol_b.layout):
        raise InvalidArgumentError("solutions were computed on different grids or paths")
    mask = sol_a.layout.mask
    worst = float(np.max((sol_a.y - sol_b.y)[mask]))
    ordered = worst <= tol
    k_violation = None
    if check_k:
        k_violation = float(np.max(sol_b.k_plus - sol_a.k_plus))
        ordered = ordered and k_violation <= tol
    return ComparisonResult(ordered=ordered, worst_violation=worst, k_violation=k_violation, tol=tol)


# =============================================================================
# A PRIORI ESTIMATE
# =============================================================================

def apriori_components(sol: SolutionBundle, problem: ProblemData, w: WeightProfile,
                       grid: TimeGrid) -> Dict[str, float]:
    """
    Both sides of the a priori estimate.

        lhs = sup_norm + ay_norm + z_norm + E[(K+_T)^2] + E[(K-_T)^2]
        rhs = E[e^{beta A_T} xi^2] + sum_i E[e^{beta A_i} f(t_i, 0, 0)^2 / a2_i] dt_i
              + E[max_i e^{2 beta A_i} ((L_i^+)^2 + (U_i^-)^2)]
    """
    layout = sol.layout
    norms = beta_norms(sol, w, grid)
    k_plus_T = sol.k_plus[-1]
    k_minus_T = sol.k_minus[-1]
    lhs = norms.sup_norm + norms.ay_norm + norms.z_norm \
        + float(np.mean(k_plus_T ** 2)) + float(np.mean(k_minus_T ** 2))

    growth = per_level(w.growth(), 2) * np.ones((1, layout.width))
    a_sq = per_level(w.a_sq, 2) * np.ones((1, layout.width))
    xi_sq = np.zeros((grid.n_steps + 1, layout.width))
    xi_sq[-1] = problem.terminal_values(layout) ** 2
    terminal_term = float(layout.mean(growth * xi_sq)[-1])
    zeros_y = np.zeros(layout.width)
    zeros_z = np.zeros((layout.width, sol.d))
    f0 = np.stack([
        problem.generator(t, zeros_y, zeros_z, layout.states[i]) for i, t in enumerate(grid.nodes)
    ])
    driver_term = float(np.sum(layout.mean(growth * f0 ** 2 / a_sq)[:-1] * grid.steps))

    lower = problem.lower_values(layout)
    upper = problem.upper_values(layout)
    barrier_sq = np.zeros((grid.n_steps + 1, layout.width))
    if lower is not None:
        barrier_sq += positive_part(lower) ** 2
    if upper is not None:
        barrier_sq += negative_part(upper) ** 2
    barrier_term = layout.expect_max(growth ** 2 * barrier_sq) if (lower is not None or upper is not None) else 0.0

    return {
        'lhs': lhs,
        'rhs': terminal_term + driver_term + barrier_term,
        'terminal': terminal_term,
        'driver': driver_term,
        'barriers': barrier_term,
        'k_plus': float(np.mean(k_plus_T ** 2)),
        'k_minus': float(np.mean(k_minus_T ** 2)),
    }


def apriori_ratio(sol: SolutionBundle, problem: ProblemData, w: WeightProfile, grid: TimeGrid) -> float:
    """LHS / RHS of the a priori estimate; 0 when the data vanish."""
    parts = apriori_components(sol, problem, w, grid)
    if parts['rhs'] == 0.0:
        return 0.0
    return parts['lhs'] / parts['rhs']


# =============================================================================
# CROSSING TIMES
# =============================================================================

def crossing_times(sol: SolutionBundle, problem: ProblemData,
                   l_max: int = Config.CROSSING_L_MAX) -> CrossingTrace:
    """
    Alternating touch times per path: after tau_0 = 0, the first node with
    Y <= L, then the first later node with Y >= U, and so on, up to l_max
    touches.

    Raises:
        InvalidArgumentError: a barrier is missing
        InconsistentBarriersError: L >= U at a valid node
    """
    if problem.lower is None or problem.upper is None:
        raise InvalidArgumentError("crossing times need both barriers")
    if l_max < 1:
        raise InvalidArgumentError("l_max must be >= 1")
    layout = sol.layout
    lower = problem.lower_values(layout)
    upper = problem.upper_values(layout)
    if np.any((upper - lower)[layout.mask] <= 0.0):
        raise InconsistentBarriersError("crossing times need L < U at every node")

    tol = Config.TOUCH_TOL
    at_lower = layout.path_view(sol.y <= lower + tol).T
    at_upper = layout.path_view(sol.y >= upper - tol).T
    touches: List[List[int]] = []
    stationary = np.zeros(at_lower.shape[0], dtype=bool)

    for p in range(at_lower.shape[0]):
        trace = [0]
        seek = (at_lower[p], at_upper[p])
        side = 0
        while len(trace) <= l_max:
            hits = np.flatnonzero(seek[side][trace[-1] + 1:])
            if hits.size == 0:
                stationary[p] = True
                break
            trace.append(trace[-1] + 1 + int(hits[0]))
            side = 1 - side
        touches.append(trace)
    return CrossingTrace(touches=touches, stationary=stationary, l_max=l_max)


# =============================================================================
# CONVERGENCE STUDY
# =============================================================================

def convergence_study(problem: ProblemData, schedule: PenaltySchedule, backend_factory: BackendFactory,
                      grid: TimeGrid, w: Optional[WeightProfile] = None,
                      lower_mode: str = 'penalize') -> ConvergenceReport:
    """
    Penalized solutions along a schedule against the clamped reference.

    The grid is refined once, by the smallest integer factor giving
    (mu + n_max) dt <= Config.PENALTY_STEP_RATIO, and every level and the
    reference are solved on that shared grid and backend.

    Args:
        problem: Barrier problem
        schedule: Penalty levels
        backend_factory: Builds a backend for a grid
        grid: Base grid
        w: Weight profile on the base grid; rebuilt on the refined grid

    Returns:
        ConvergenceReport, one row per level
    """
    mu_max = max(float(np.max([problem.generator.mu(t) for t in grid.nodes])),
                 float(np.max(w.mu)) if w is not None else 0.0)
    needed = (mu_max + schedule.largest) * grid.max_step / Config.PENALTY_STEP_RATIO
    factor = max(1, int(np.ceil(needed - 1e-12)))
    fine = grid.refine(factor)
    weights = _refined_weights(problem, w, grid, fine, factor)
    logger.info("Convergence study on %r (refined x%d) over n=%s", fine, factor, list(schedule))

    backend = backend_factory(fine)
    reference = solve_clamped(problem, backend, fine, weights)
    lower = problem.lower_values(backend.layout)
    upper = problem.upper_values(backend.layout)
    mask = backend.layout.mask
    report = ConvergenceReport(reference_y0=reference.y0, refinement=factor, grid_steps=fine.n_steps)

    for n in schedule:
        try:
            sol = solve_penalized(problem, n, backend, fine, weights, lower_mode)
        except DRBSDEError as exc:
            exc.penalty = n
            exc.args = (f"penalty n={n}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        upper_gap = positive_part(sol.y - upper) if upper is not None else np.zeros_like(sol.y)
        lower_gap = positive_part(lower - sol.y) if lower is not None else np.zeros_like(sol.y)
        upper_gap = np.where(mask, upper_gap, 0.0)
        lower_gap = np.where(mask, lower_gap, 0.0)
        upper_max = float(upper_gap.max())
        level = ConvergenceLevel(
            penalty=n,
            upper_violation=upper_max,
            upper_violation_expect_max=sol.layout.expect_max(upper_gap),
            lower_violation=float(lower_gap.max()),
            lower_violation_expect_max=sol.layout.expect_max(lower_gap),
            distance=beta_distance(sol, reference, weights, fine).combined,
            scaled_violation=n * upper_max,
            y0=sol.y0,
        )
        logger.debug("n=%d distance=%.6e n*violation=%.6e", n, level.distance, level.scaled_violation)
        report.levels.append(level)
    return report


def _refined_weights(problem: ProblemData, w: Optional[WeightProfile], grid: TimeGrid,
                     fine: TimeGrid, factor: int) -> WeightProfile:
    """Carry a weight profile to the refined grid, constant within each coarse step."""
    if w is None:
        return weights_for_problem(problem, fine)
    if factor == 1:
        return w
    if np.ndim(w.mu) > 1 or np.ndim(w.gamma) > 1 or w.mu.shape[0] != grid.n_steps + 1:
        raise InvalidArgumentError("only deterministic weight profiles of the base grid can be refined")
    mu = np.append(np.repeat(w.mu[:-1], factor), w.mu[-1])
    gamma = np.append(np.repeat(w.gamma[:-1], factor), w.gamma[-1])
    return accumulate_weights(mu, gamma, w.eps, w.beta, fine)
