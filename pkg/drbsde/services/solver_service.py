"""
Solver Service Module

Backward solvers on a conditional-expectation backend:
- solve_bsde: plain BSDE, implicit in y and explicit in z
- solve_penalized: barriers replaced by the penalty -n(y - U)^+ + n(y - L)^-
- solve_clamped: exact discrete reflection by projection onto [L, U]
- picard_solve: fixed-point iteration on the frozen generator

All solvers share one backward sweep. At step i the backend supplies
E_i[Y_{i+1}] and Z_i = E_i[Y_{i+1} dB_i] / dt_i; the solver turns them into
(Y_i, dK+_i, dK-_i).

On a pathwise (regression) backend the regression target is the realized
value along each path: where the fitted step pushes at a barrier the path
takes the barrier value, elsewhere it carries Y_{i+1} - Z_i dB_i through the
unreflected step. The fitted values only decide where a barrier is hit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from drbsde.config import Config
from drbsde.errors import InvalidArgumentError, StepSizeTooLargeError
from drbsde.models import BarrierFn, ProblemData, SolutionBundle, TimeGrid, WeightProfile
from drbsde.services.core_service import beta_distance
from drbsde.services.expectation_service import ExpectationBackend
from drbsde.utils.generators import Generator
from drbsde.utils.math_utils import negative_part, positive_part

logger = logging.getLogger(__name__)

# step(i, expect, z, x, lower_i, upper_i) -> (y_i, dk_plus_i, dk_minus_i, inner_iterations)
StepFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]],
                  Tuple[np.ndarray, np.ndarray, np.ndarray, int]]


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty levels n for convergence studies."""
    levels: Tuple[int, ...] = Config.DEFAULT_SCHEDULE

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise InvalidArgumentError("penalty schedule is empty")
        if any(isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1 for n in levels):
            raise InvalidArgumentError("penalty levels must be positive integers")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidArgumentError("penalty levels must be strictly increasing")
        object.__setattr__(self, "levels", tuple(int(n) for n in levels))

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def largest(self) -> int:
        return self.levels[-1]


@dataclass(frozen=True)
class PicardConfig:
    tol: float = Config.PICARD_TOL
    max_iter: int = Config.PICARD_MAX_ITER
    beta: float = Config.DEFAULT_BETA

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgumentError("Picard tolerance must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("Picard needs at least one iteration")
        if not self.beta > 5:
            raise InvalidArgumentError(f"Picard iteration needs beta > 5, got {self.beta:g}")


@dataclass
class PicardTrace:
    """Per-iteration squared B^2-distances between successive iterates."""
    distances: List[float] = field(default_factory=list)
    converged: bool = False
    tol: float = Config.PICARD_TOL

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def ratios(self) -> List[float]:
        return [
            b / a if a > 0 else 0.0
            for a, b in zip(self.distances, self.distances[1:])
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iterations': self.iterations,
            'converged': self.converged,
            'tol': self.tol,
            'distances': list(self.distances),
            'ratios': self.ratios,
        }


# =============================================================================
# GENERATORS
# =============================================================================

def penalize_generator(f: Generator, n: float,
                       lower: Optional[BarrierFn] = None,
                       upper: Optional[BarrierFn] = None) -> Generator:
    """
    f^n(t, y, z) = f(t, y, z) - n (y - U_t)^+ + n (y - L_t)^-

    An absent barrier contributes nothing. The declared y-envelope grows to mu + n.
    """
    if n < 0:
        raise InvalidArgumentError("penalty must be nonnegative")
    if n == 0 or (lower is None and upper is None):
        return f
    n = float(n)
    base = f.fn

    def fn(t, y, z, x):
        x_level = np.zeros(np.shape(y)) if x is None else x
        value = base(t, y, z, x)
        if upper is not None:
            value = value - n * positive_part(y - upper(t, x_level))
        if lower is not None:
            value = value + n * negative_part(y - lower(t, x_level))
        return value

    return replace(
        f,
        name=f"{f.name}+penalty({n:g})",
        fn=fn,
        mu=lambda t: f.mu(t) + n,
        depends_on_y=True,
    )


# =============================================================================
# SOLVERS
# =============================================================================

def solve_bsde(problem: ProblemData, backend: ExpectationBackend, grid: TimeGrid,
               w: WeightProfile) -> SolutionBundle:
    """
    Plain BSDE: Y_N = xi, Y_i = E_i[Y_{i+1}] + f(t_i, Y_i, Z_i) dt_i.

    Raises:
        InvalidArgumentError: the problem has barriers
        StepSizeTooLargeError: mu(t_i) dt_i >= 1 at some node
    """
    if problem.has_barriers:
        raise InvalidArgumentError("solve_bsde takes a problem without barriers")
    _check_step_sizes(problem.generator, grid, w, penalty=0.0)
    generator = problem.generator

    def step(i, expect, z, x, lower, upper):
        y, iterations = _solve_implicit(generator, grid, i, expect, z, x)
        zeros = np.zeros_like(y)
        return y, zeros, zeros, iterations

    return _backward_sweep(problem, backend, grid, step, meta={'solver': 'bsde'})


def solve_penalized(problem: ProblemData, n: int, backend: ExpectationBackend, grid: TimeGrid,
                    w: WeightProfile, lower_mode: str = 'penalize') -> SolutionBundle:
    """
    Penalized scheme at level n.

    lower_mode='penalize' penalizes both barriers. lower_mode='clamp' penalizes
    U only and reflects at L exactly, the single-penalty form.
    dK+_i = n (Y_i - L_i)^- dt_i and dK-_i = n (Y_i - U_i)^+ dt_i for penalized barriers.

    Raises:
        StepSizeTooLargeError: (mu + n) dt >= 1 at some node
    """
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 0:
        raise InvalidArgumentError(f"penalty must be a nonnegative integer, got {n!r}")
    if lower_mode not in Config.LOWER_MODES:
        raise InvalidArgumentError(f"lower_mode must be one of {list(Config.LOWER_MODES)}")
    generator = problem.generator
    clamp_lower = lower_mode == 'clamp'
    penalized = problem.upper is not None or (problem.lower is not None and not clamp_lower)
    penalty = float(n) if penalized else 0.0
    _check_step_sizes(generator, grid, w, penalty=penalty)

    def step(i, expect, z, x, lower, upper):
        dt = grid.steps[i]
        penalized_lower = None if clamp_lower else lower
        resolve = _penalty_resolvent(penalty * dt, penalized_lower, upper)
        y, iterations = _solve_implicit(generator, grid, i, expect, z, x, resolve)
        dk_minus = penalty * dt * positive_part(y - upper) if upper is not None else np.zeros_like(y)
        if lower is None:
            dk_plus = np.zeros_like(y)
        elif clamp_lower:
            dk_plus = positive_part(lower - y)
            y = np.maximum(lower, y)
        else:
            dk_plus = penalty * dt * positive_part(lower - y)
        return y, dk_plus, dk_minus, iterations

    meta = {'solver': 'penalized', 'penalty': int(n), 'lower_mode': lower_mode}
    return _backward_sweep(problem, backend, grid, step, meta=meta)


def solve_clamped(problem: ProblemData, backend: ExpectationBackend, grid: TimeGrid,
                  w: WeightProfile) -> SolutionBundle:
    """
    Exact reflection: Y~_i solves the implicit step, Y_i = min(U_i, max(L_i, Y~_i)),
    dK+_i = (L_i - Y~_i)^+ and dK-_i = (Y~_i - U_i)^+.

    Raises:
        InconsistentBarriersError: L > U at a node, or xi outside [L_T, U_T]
    """
    _check_step_sizes(problem.generator, grid, w, penalty=0.0)
    generator = problem.generator

    def step(i, expect, z, x, lower, upper):
        y_tilde, iterations = _solve_implicit(generator, grid, i, expect, z, x)
        y, dk_plus, dk_minus = _project(y_tilde, lower, upper)
        return y, dk_plus, dk_minus, iterations

    return _backward_sweep(problem, backend, grid, step, meta={'solver': 'clamped'})


def picard_solve(problem: ProblemData, cfg: PicardConfig, backend: ExpectationBackend,
                 grid: TimeGrid, w: WeightProfile) -> Tuple[SolutionBundle, PicardTrace]:
    """
    Fixed-point iteration (phi, psi) -> (Y, Z).

    Iteration 0 freezes the generator at (0, 0); iteration k freezes it at
    the previous iterate and solves the reflected problem by projection.
    Stops once the squared B^2-distance of successive iterates is <= tol.

    Returns:
        Tuple of (last iterate, PicardTrace); trace.converged is False when
        max_iter was reached first
    """
    weights = w if w.beta == cfg.beta else replace(w, beta=float(cfg.beta))
    generator = problem.generator
    layout = backend.layout
    levels = grid.n_steps + 1
    frozen_y = np.zeros((levels, layout.width))
    frozen_z = np.zeros((levels, layout.width, backend.d))
    trace = PicardTrace(tol=cfg.tol)

    current = _frozen_solve(problem, backend, grid, generator, frozen_y, frozen_z, iteration=0)
    for k in range(1, cfg.max_iter + 1):
        previous = current
        current = _frozen_solve(problem, backend, grid, generator, previous.y, previous.z, iteration=k)
        distance = beta_distance(current, previous, weights, grid).combined
        trace.distances.append(distance)
        logger.debug("Picard iteration %d: distance %.6e", k, distance)
        if distance <= cfg.tol:
            trace.converged = True
            break

    if not trace.converged:
        logger.warning("Picard iteration stopped after %d iterations (last distance %.3e > tol %.1e)",
                       trace.iterations, trace.distances[-1], cfg.tol)
    current.meta.update({'solver': 'picard', 'picard': trace.to_dict()})
    return current, trace


def _frozen_solve(problem: ProblemData, backend: ExpectationBackend, grid: TimeGrid,
                  generator: Generator, frozen_y: np.ndarray, frozen_z: np.ndarray,
                  iteration: int) -> SolutionBundle:
    def step(i, expect, z, x, lower, upper):
        driver = generator(grid.nodes[i], frozen_y[i], frozen_z[i], x)
        y, dk_plus, dk_minus = _project(expect + grid.steps[i] * driver, lower, upper)
        return y, dk_plus, dk_minus, 1

    return _backward_sweep(problem, backend, grid, step, meta={'iteration': iteration})


# =============================================================================
# BACKWARD SWEEP
# =============================================================================

def _backward_sweep(problem: ProblemData, backend: ExpectationBackend, grid: TimeGrid,
                    step: StepFn, meta: Dict[str, Any]) -> SolutionBundle:
    layout = backend.layout
    if not grid.same_as(backend.grid):
        raise InvalidArgumentError("backend was prepared for a different grid")

    terminal = problem.terminal_values(layout)
    lower = problem.lower_values(layout)
    upper = problem.upper_values(layout)
    if problem.has_barriers:
        problem.check_barriers(layout, lower, upper, terminal)

    n_steps, width = grid.n_steps, layout.width
    y = np.zeros((n_steps + 1, width))
    z = np.zeros((n_steps + 1, width, backend.d))
    dk_plus = np.zeros((n_steps + 1, width))
    dk_minus = np.zeros((n_steps + 1, width))
    y[-1] = terminal
    inner = 0
    # Pathwise backends regress realized values; the fitted step only decides the pushes
    carried = np.array(terminal, dtype=float) if backend.pathwise else None

    for i in range(n_steps - 1, -1, -1):
        x_i = layout.states[i]
        lower_i = None if lower is None else lower[i]
        upper_i = None if upper is None else upper[i]
        target = y[i + 1] if carried is None else carried
        expect, z[i] = backend.condexp_with_z(target, i)
        y[i], dk_plus[i], dk_minus[i], iterations = step(i, expect, z[i], x_i, lower_i, upper_i)
        inner = max(inner, iterations)
        if carried is not None and i > 0:
            realized = carried - backend.martingale_increment(z[i], i)
            free, _, _, _ = step(i, realized, z[i], x_i, None, None)
            pushed = (dk_plus[i] > 0.0) | (dk_minus[i] > 0.0)
            carried = np.where(pushed, y[i], free)

    mask = layout.mask
    y = np.where(mask, y, 0.0)
    z = np.where(mask[..., None], z, 0.0)
    dk_plus = np.where(mask, dk_plus, 0.0)
    dk_minus = np.where(mask, dk_minus, 0.0)
    meta = {'backend': getattr(backend, 'name', type(backend).__name__), 'inner_iterations': inner, **meta}
    logger.debug("Backward sweep done: %s", meta)
    return SolutionBundle(y=y, z=z, dk_plus=dk_plus, dk_minus=dk_minus, layout=layout, meta=meta)


def _check_step_sizes(generator: Generator, grid: TimeGrid, w: WeightProfile, penalty: float) -> None:
    """Reject (mu_i + n) dt_i >= 1."""
    declared = np.array([generator.mu(t) for t in grid.nodes[:-1]])
    mu = np.maximum(declared, w.mu_by_level()[:-1]) if w.mu.shape[0] == grid.n_steps + 1 else declared
    stiffness = (mu + penalty) * grid.steps
    bad = np.flatnonzero(stiffness >= 1.0)
    if bad.size:
        i = int(bad[0])
        raise StepSizeTooLargeError(
            f"(mu + n) * dt = {stiffness[i]:.6g} >= 1 at node {i}; refine the grid",
            node=i, value=float(stiffness[i]),
        )


def _solve_implicit(generator: Generator, grid: TimeGrid, i: int, expect: np.ndarray,
                    z: np.ndarray, x: np.ndarray,
                    resolve: Callable[[np.ndarray], np.ndarray] = lambda c: c) -> Tuple[np.ndarray, int]:
    """Fixed point of y = resolve(E + f(t, y, z) dt)."""
    t, dt = grid.nodes[i], grid.steps[i]
    y = resolve(expect + dt * generator(t, expect, z, x))
    if not generator.depends_on_y:
        return y, 1
    for k in range(2, Config.INNER_MAX_ITER + 1):
        y_next = resolve(expect + dt * generator(t, y, z, x))
        change = float(np.max(np.abs(y_next - y), initial=0.0))
        y = y_next
        if change <= Config.INNER_TOL * (1.0 + float(np.max(np.abs(y), initial=0.0))):
            return y, k
    logger.warning("Inner fixed point at node %d hit the iteration cap (%d)", i, Config.INNER_MAX_ITER)
    return y, Config.INNER_MAX_ITER


def _penalty_resolvent(k: float, lower: Optional[np.ndarray],
                       upper: Optional[np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    """
    Exact solution y of y = c - k (y - U)^+ + k (y - L)^- for k = n dt, given L <= U.
    """
    if k == 0.0 or (lower is None and upper is None):
        return lambda c: c

    def resolve(c: np.ndarray) -> np.ndarray:
        y = c
        if upper is not None:
            y = np.where(c > upper, (c + k * upper) / (1.0 + k), y)
        if lower is not None:
            y = np.where(c < lower, (c + k * lower) / (1.0 + k), y)
        return y

    return resolve


def _project(y_tilde: np.ndarray, lower: Optional[np.ndarray],
             upper: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projection onto [L, U] with the pushes it took."""
    y = y_tilde
    dk_plus = np.zeros_like(y_tilde)
    dk_minus = np.zeros_like(y_tilde)
    if lower is not None:
        dk_plus = positive_part(lower - y_tilde)
        y = np.maximum(lower, y)
    if upper is not None:
        dk_minus = positive_part(y_tilde - upper)
        y = np.minimum(upper, y)
    return y, dk_plus, dk_minus
