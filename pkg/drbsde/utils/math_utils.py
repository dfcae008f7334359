from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from drbsde.errors import InvalidArgumentError

Curve = Union[float, int, Sequence[float], np.ndarray, Callable[[float], float]]


def positive_part(x):
    """x^+ = max(x, 0), elementwise."""
    return np.maximum(x, 0.0)


def negative_part(x):
    """x^- = max(-x, 0), elementwise."""
    return np.maximum(-x, 0.0)


def evaluate_curve(curve: Curve, nodes: np.ndarray, name: str = "curve") -> np.ndarray:
    """
    Evaluate a coefficient curve on grid nodes.

    A curve is a scalar (constant), a sequence with one value per node, or a
    callable of time. Returns a float array with one value per node.
    """
    nodes = np.asarray(nodes, dtype=float)
    if callable(curve):
        values = np.array([float(curve(t)) for t in nodes])
    else:
        values = np.asarray(curve, dtype=float)
        if values.ndim == 0:
            values = np.full(nodes.shape, float(values))
    if values.shape != nodes.shape:
        raise InvalidArgumentError(
            f"{name} has {values.size} values, expected one per node ({nodes.size})"
        )
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(f"{name} has non-finite values")
    return values


def per_level(values: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-level array (N+1,) so it broadcasts against (N+1, M, ...)."""
    values = np.asarray(values)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def left_endpoint_cumsum(values: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """
    Left-endpoint cumulative integral: out[0] = 0, out[i] = sum_{j<i} values[j] * steps[j].

    ``values`` has one row per node (N+1 rows), ``steps`` one entry per step.
    """
    values = np.asarray(values, dtype=float)
    increments = values[:-1] * per_level(steps, values.ndim)
    out = np.zeros_like(values)
    np.cumsum(increments, axis=0, out=out[1:])
    return out


def left_endpoint_sum(per_node: np.ndarray, steps: np.ndarray) -> float:
    """sum_{i<N} per_node[i] * steps[i] for a per-level series."""
    return float(np.sum(np.asarray(per_node)[:-1] * steps))


def node_index(nodes: np.ndarray, t: float) -> int:
    """Index of the grid cell containing t (the node itself when t is a node)."""
    i = int(np.searchsorted(nodes, t + 1e-12 * max(1.0, abs(t)), side="right")) - 1
    return min(max(i, 0), len(nodes) - 1)


def scalar_state(x: np.ndarray) -> np.ndarray:
    """First state component: (M,) stays, (M, d) -> (M,)."""
    x = np.asarray(x, dtype=float)
    return x[:, 0] if x.ndim == 2 else x
