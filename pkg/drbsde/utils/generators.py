"""
Generator catalog.

A generator is the driver f(t, y, z) of the backward equation, evaluated on
a whole level of states at once. Every generator declares its stochastic
Lipschitz envelope (mu(t), gamma(t)):

    |f(t,y,z) - f(t,y',z')| <= mu(t)|y-y'| + gamma(t)|z-z'|

The envelope feeds the weight profile and the solver's step-size check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np

from drbsde.errors import InvalidArgumentError
from drbsde.utils.math_utils import Curve, evaluate_curve, node_index

DriverFn = Callable[[float, np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class Generator:
    """Vectorised driver f(t, y, z; x) with its declared Lipschitz envelope."""
    name: str
    fn: DriverFn
    mu: Callable[[float], float]
    gamma: Callable[[float], float]
    depends_on_y: bool = True

    def __call__(self, t: float, y: np.ndarray, z: np.ndarray, x: Optional[np.ndarray] = None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(self.fn(t, y, z, x), dtype=float), y.shape)

    def shifted(self, offset: float) -> Generator:
        """f + offset; same envelope."""
        base = self.fn
        return replace(
            self,
            name=f"{self.name}{offset:+g}",
            fn=lambda t, y, z, x: base(t, y, z, x) + offset,
        )


# =============================================================================
# CATALOG
# =============================================================================

class _NodeLookup:
    """Piecewise-constant (left-continuous in index) lookup of per-node values."""

    def __init__(self, nodes: np.ndarray, values: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)

    def __call__(self, t: float) -> float:
        return float(self.values[node_index(self.nodes, t)])


def zero() -> Generator:
    return Generator(
        name="zero",
        fn=lambda t, y, z, x: np.zeros_like(y),
        mu=lambda t: 0.0,
        gamma=lambda t: 0.0,
        depends_on_y=False,
    )


def linear(rate: float) -> Generator:
    """f(t, y, z) = -rate * y."""
    rate = float(rate)
    return Generator(
        name="linear",
        fn=lambda t, y, z, x: -rate * y,
        mu=lambda t: abs(rate),
        gamma=lambda t: 0.0,
    )


def affine(intercept: float = 0.0, y_coef: float = 0.0, z_coef: Any = 0.0) -> Generator:
    """f(t, y, z) = intercept + y_coef * y + <z_coef, z>."""
    intercept = float(intercept)
    y_coef = float(y_coef)
    z_vec = np.atleast_1d(np.asarray(z_coef, dtype=float))
    z_norm = float(np.linalg.norm(z_vec))

    def fn(t, y, z, x):
        z = np.asarray(z, dtype=float)
        # Coefficients beyond the given ones are zero
        k = min(z_vec.size, z.shape[-1])
        return intercept + y_coef * y + z[..., :k] @ z_vec[:k]

    return Generator(
        name="affine",
        fn=fn,
        mu=lambda t: abs(y_coef),
        gamma=lambda t: z_norm,
        depends_on_y=y_coef != 0.0,
    )


def discounting(rates: Curve, nodes: np.ndarray) -> Generator:
    """
    f(t, y) = -rho(t) * y with the step-consistent rate rho_i = (e^{r_i dt_i} - 1) / dt_i.

    With this rate the implicit backward step y = E + f(y) dt returns exactly
    e^{-r_i dt_i} E, so discounting matches a tree recursion step for step.
    """
    nodes = np.asarray(nodes, dtype=float)
    r = evaluate_curve(rates, nodes, "rate")
    steps = np.diff(nodes)
    rho = r.copy()
    rho[:-1] = np.expm1(r[:-1] * steps) / steps
    lookup = _NodeLookup(nodes, rho)
    envelope = _NodeLookup(nodes, np.abs(rho))
    return Generator(
        name="discounting",
        fn=lambda t, y, z, x: -lookup(t) * y,
        mu=envelope,
        gamma=lambda t: 0.0,
    )


def physical_discounting(rates: Curve, premia: Curve, nodes: np.ndarray) -> Generator:
    """
    f(t, y, z) = -r(t) y - theta(t) z: pricing under the physical measure.

    The risk premium enters through z, so gamma = |theta| is a genuine
    stochastic-Lipschitz constant when theta is large.
    """
    nodes = np.asarray(nodes, dtype=float)
    r = _NodeLookup(nodes, evaluate_curve(rates, nodes, "rate"))
    theta = _NodeLookup(nodes, evaluate_curve(premia, nodes, "theta"))

    def fn(t, y, z, x):
        z = np.asarray(z, dtype=float)
        return -r(t) * y - theta(t) * z[..., 0]

    return Generator(
        name="physical_discounting",
        fn=fn,
        mu=lambda t: abs(r(t)),
        gamma=lambda t: abs(theta(t)),
    )


CATALOG: Dict[str, Callable[..., Generator]] = {
    "zero": zero,
    "linear": linear,
    "affine": affine,
    "discounting": discounting,
    "physical_discounting": physical_discounting,
}

# Catalog entries whose factories need the grid nodes
NEEDS_NODES = frozenset({"discounting", "physical_discounting"})


def build_generator(name: str, params: Optional[Mapping[str, Any]] = None,
                    nodes: Optional[np.ndarray] = None) -> Generator:
    """
    Build a catalog generator by name.

    Args:
        name: Catalog key
        params: Keyword parameters of the catalog factory
        nodes: Grid nodes, required by the discounting forms

    Returns:
        The configured Generator
    """
    if name not in CATALOG:
        raise InvalidArgumentError(f"unknown generator '{name}'; choose from {sorted(CATALOG)}")
    kwargs = dict(params or {})
    if name in NEEDS_NODES:
        if nodes is None:
            raise InvalidArgumentError(f"generator '{name}' needs the grid nodes")
        kwargs["nodes"] = nodes
    try:
        return CATALOG[name](**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad parameters for generator '{name}': {exc}") from exc


# =============================================================================
# ENVELOPE PROBING
# =============================================================================

def probe_lipschitz(generator: Generator, nodes: np.ndarray, d: int = 1,
                    n_probes: int = 1000, seed: int = 0, scale: float = 10.0) -> float:
    """
    Probe the declared envelope at random pairs of points.

    Returns the largest excess |f(t,y,z) - f(t,y',z')| - (mu|y-y'| + gamma|z-z'|)
    over the probes; a value <= 0 (up to rounding) means no violation was found.
    """
    rng = np.random.default_rng(seed)
    nodes = np.asarray(nodes, dtype=float)
    ts = rng.choice(nodes, size=n_probes)
    worst = -np.inf
    for t in ts:
        y1, y2 = rng.uniform(-scale, scale, size=(2, 1))
        z1, z2 = rng.uniform(-scale, scale, size=(2, 1, d))
        x = rng.uniform(0.5, 2.0 * scale, size=(1,))
        gap = abs(float(generator(t, y1, z1, x)[0] - generator(t, y2, z2, x)[0]))
        bound = generator.mu(t) * abs(float(y1[0] - y2[0])) \
            + generator.gamma(t) * float(np.linalg.norm(z1 - z2))
        worst = max(worst, gap - bound)
    return float(worst)
