from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Callable, Dict, Optional

import numpy as np

from drbsde.errors import InconsistentBarriersError, InvalidArgumentError
from drbsde.utils.math_utils import Curve, evaluate_curve

if TYPE_CHECKING:
    from drbsde.utils.generators import Generator

BarrierFn = Callable[[float, np.ndarray], np.ndarray]
TerminalFn = Callable[[np.ndarray], np.ndarray]


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


class TimeGrid:
    """Time mesh t_0 = 0 < t_1 < ... < t_N = T"""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidArgumentError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise InvalidArgumentError("grid must start at t_0 = 0")
        steps = np.diff(nodes)
        if not np.all(steps > 0):
            raise InvalidArgumentError("grid nodes must be strictly increasing")
        self.nodes = _frozen_array(nodes)
        self.steps = _frozen_array(steps)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def max_step(self) -> float:
        return float(self.steps.max())

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.steps, self.steps[0], rtol=1e-12, atol=0.0))

    def refine(self, factor: int) -> TimeGrid:
        """Split every step into ``factor`` equal sub-steps (original nodes are kept)."""
        factor = int(factor)
        if factor < 1:
            raise InvalidArgumentError("refinement factor must be >= 1")
        if factor == 1:
            return self
        fractions = np.arange(factor) / factor
        inner = (self.nodes[:-1, None] + self.steps[:, None] * fractions[None, :]).ravel()
        return TimeGrid(np.append(inner, self.nodes[-1]))

    def same_as(self, other: TimeGrid) -> bool:
        return self.nodes.shape == other.nodes.shape and bool(np.array_equal(self.nodes, other.nodes))

    def __repr__(self) -> str:
        return f"TimeGrid(T={self.horizon:g}, N={self.n_steps})"


@dataclass(frozen=True, eq=False)
class WeightProfile:
    """
    Stochastic Lipschitz data on the grid.

    mu, gamma, a_sq and A have shape (N+1,) for deterministic rates or
    (N+1, M) when the rates depend on the state (adapted processes).
    a_sq = max(mu + gamma^2, eps) and A(t_i) = sum_{j<i} a_sq(t_j) dt_j.
    """
    mu: np.ndarray
    gamma: np.ndarray
    eps: float
    beta: float
    a_sq: np.ndarray
    A: np.ndarray

    def growth(self) -> np.ndarray:
        """e^{beta A(t_i)}"""
        return np.exp(self.beta * self.A)

    def mu_by_level(self) -> np.ndarray:
        """Largest mu on each level (the step-size check is per level)."""
        mu = np.asarray(self.mu)
        return mu if mu.ndim == 1 else mu.max(axis=tuple(range(1, mu.ndim)))


@dataclass(frozen=True, eq=False)
class StateLayout:
    """
    State space of each grid level.

    kind:    'paths' (Monte Carlo, one column per path) or 'lattice'
             (column j of level i is tree node j, valid for j <= i)
    times:   grid nodes (N+1,)
    states:  per-level states, (N+1, M) or (N+1, M, d)
    mask:    valid entries (N+1, M)
    weights: probability of each entry within its level (N+1, M)
    paths:   (K, N+1) column index visited by each sample path; None means
             column p is path p at every level
    """
    kind: str
    times: np.ndarray
    states: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    paths: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def n_levels(self) -> int:
        return self.mask.shape[0]

    def mean(self, values: np.ndarray) -> np.ndarray:
        """Expectation of a (N+1, M) field on each level."""
        values = np.asarray(values, dtype=float)
        if self.kind == "paths":
            return values.mean(axis=1)
        return np.einsum("ij,ij->i", self.weights, np.where(self.mask, values, 0.0))

    def path_view(self, values: np.ndarray) -> np.ndarray:
        """Values along the sample paths, shape (N+1, K)."""
        values = np.asarray(values)
        if self.paths is None:
            return values
        levels = np.arange(self.n_levels)[:, None]
        return values[levels, self.paths.T]

    def expect_max(self, values: np.ndarray) -> float:
        """E[max_i values_i] estimated over the sample paths."""
        return float(np.mean(np.max(self.path_view(values), axis=0)))

    def cumulate(self, increments: np.ndarray) -> np.ndarray:
        """K_0 = 0, K_i = sum_{j<i} dK_j along each sample path, shape (N+1, K)."""
        along = self.path_view(increments)
        out = np.zeros(along.shape, dtype=float)
        np.cumsum(along[:-1], axis=0, out=out[1:])
        return out

    def compatible(self, other: StateLayout) -> bool:
        if self.kind != other.kind or self.states.shape != other.states.shape:
            return False
        if not np.array_equal(self.times, other.times) or not np.array_equal(self.states, other.states):
            return False
        if (self.paths is None) != (other.paths is None):
            return False
        return self.paths is None or np.array_equal(self.paths, other.paths)


@dataclass(frozen=True)
class ProblemData:
    """Data (xi, f, L, U); an absent barrier stands for -inf / +inf."""
    terminal: TerminalFn
    generator: Generator
    lower: Optional[BarrierFn] = None
    upper: Optional[BarrierFn] = None
    strict_separation: bool = False
    name: str = "problem"

    @property
    def has_barriers(self) -> bool:
        return self.lower is not None or self.upper is not None

    def without_upper(self) -> ProblemData:
        return replace(self, upper=None, strict_separation=False)

    def without_lower(self) -> ProblemData:
        return replace(self, lower=None, strict_separation=False)

    def without_barriers(self) -> ProblemData:
        return replace(self, lower=None, upper=None, strict_separation=False)

    def with_generator(self, generator: Generator) -> ProblemData:
        return replace(self, generator=generator)

    # ---- evaluation on a layout ---------------------------------------------

    def terminal_values(self, layout: StateLayout) -> np.ndarray:
        return _level(self.terminal(layout.states[-1]), layout.width)

    def lower_values(self, layout: StateLayout) -> Optional[np.ndarray]:
        return _barrier_field(self.lower, layout)

    def upper_values(self, layout: StateLayout) -> Optional[np.ndarray]:
        return _barrier_field(self.upper, layout)

    def check_barriers(self, layout: StateLayout,
                       lower: Optional[np.ndarray] = None,
                       upper: Optional[np.ndarray] = None,
                       terminal: Optional[np.ndarray] = None,
                       tol: float = 1e-12) -> None:
        """
        Raise InconsistentBarriersError when L > U (or L >= U under strict
        separation) at a valid node, or when the terminal value leaves the band.
        """
        lower = self.lower_values(layout) if lower is None and self.lower is not None else lower
        upper = self.upper_values(layout) if upper is None and self.upper is not None else upper
        terminal = self.terminal_values(layout) if terminal is None else terminal
        mask = layout.mask
        if lower is not None and upper is not None:
            gap = np.where(mask, upper - lower, np.inf)
            if self.strict_separation and np.any(gap <= 0.0):
                i, j = np.argwhere(gap <= 0.0)[0]
                raise InconsistentBarriersError(f"barriers not strictly separated at node ({i}, {j})")
            if np.any(gap < 0.0):
                i, j = np.argwhere(gap < 0.0)[0]
                raise InconsistentBarriersError(f"lower barrier above upper barrier at node ({i}, {j})")
        last = mask[-1]
        if lower is not None and np.any(terminal[last] < lower[-1][last] - tol):
            raise InconsistentBarriersError("terminal value below the lower barrier at maturity")
        if upper is not None and np.any(terminal[last] > upper[-1][last] + tol):
            raise InconsistentBarriersError("terminal value above the upper barrier at maturity")


def _level(values, width: int) -> np.ndarray:
    return np.array(np.broadcast_to(np.asarray(values, dtype=float), (width,)))


def _barrier_field(barrier: Optional[BarrierFn], layout: StateLayout) -> Optional[np.ndarray]:
    if barrier is None:
        return None
    return np.stack([
        _level(barrier(float(t), layout.states[i]), layout.width)
        for i, t in enumerate(layout.times)
    ])


@dataclass(eq=False)
class SolutionBundle:
    """
    Discrete solution (Y, Z, K+, K-) on a layout.

    y: (N+1, M); z: (N+1, M, d) with z[N] = 0; dk_plus/dk_minus: (N+1, M)
    nodewise reflection increments, K_{i+1} = K_i + dK_i.
    """
    y: np.ndarray
    z: np.ndarray
    dk_plus: np.ndarray
    dk_minus: np.ndarray
    layout: StateLayout
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def k_plus(self) -> np.ndarray:
        """Cumulative K+ along the layout's sample paths."""
        return self.layout.cumulate(self.dk_plus)

    @property
    def k_minus(self) -> np.ndarray:
        return self.layout.cumulate(self.dk_minus)

    @property
    def y0(self) -> float:
        return float(self.layout.mean(self.y)[0])

    @property
    def d(self) -> int:
        return self.z.shape[2]

    def difference(self, other: SolutionBundle) -> SolutionBundle:
        """(Y - Y', Z - Z') with no reflection, for distances."""
        if self.y.shape != other.y.shape or self.z.shape != other.z.shape:
            raise InvalidArgumentError("solutions live on different layouts")
        zeros = np.zeros_like(self.y)
        return SolutionBundle(self.y - other.y, self.z - other.z, zeros, zeros.copy(), self.layout)

    def series(self) -> Dict[str, np.ndarray]:
        """Per-node means (t, Y, Z, K+, K-) for plotting."""
        z_mean = np.stack([self.layout.mean(self.z[..., k]) for k in range(self.d)], axis=1)
        return {
            "t": np.asarray(self.layout.times, dtype=float),
            "mean_y": self.layout.mean(self.y),
            "mean_z": z_mean.sum(axis=1) if self.d > 1 else z_mean[:, 0],
            "mean_k_plus": self.k_plus.mean(axis=1),
            "mean_k_minus": self.k_minus.mean(axis=1),
        }


@dataclass(frozen=True)
class NormReport:
    """beta-weighted norms of a solution (path-averaged, left-endpoint quadrature)."""
    sup_norm: float
    ay_norm: float
    z_norm: float

    @property
    def combined(self) -> float:
        """Squared B^2 norm: ||aY||^2 + ||Z||^2."""
        return self.ay_norm + self.z_norm

    def to_dict(self) -> Dict[str, float]:
        return {
            "sup_norm": self.sup_norm,
            "ay_norm": self.ay_norm,
            "z_norm": self.z_norm,
            "combined": self.combined,
        }


@dataclass(frozen=True)
class MarketSpec:
    """Black-Scholes coefficients r(t), theta(t), sigma(t) and spot S0."""
    s0: float
    r: Curve = 0.0
    theta: Curve = 0.0
    sigma: Curve = 0.2

    def __post_init__(self):
        if not self.s0 > 0:
            raise InvalidArgumentError("S0 must be positive")

    def curves(self, grid: TimeGrid):
        """(r, theta, sigma) evaluated on the grid nodes."""
        r = evaluate_curve(self.r, grid.nodes, "r")
        theta = evaluate_curve(self.theta, grid.nodes, "theta")
        sigma = evaluate_curve(self.sigma, grid.nodes, "sigma")
        return r, theta, sigma

    def risk_neutral(self) -> MarketSpec:
        return replace(self, theta=0.0)
