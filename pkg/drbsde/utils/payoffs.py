"""
Payoff catalog for terminal values and barriers.

Payoffs are functions of (t, x) evaluated on a whole level of states, where
x is the asset price (market problems) or the Brownian state (first
component when d > 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from drbsde.errors import InvalidArgumentError
from drbsde.utils.math_utils import scalar_state

PAYOFF_KINDS = ("constant", "put", "call", "identity")


@dataclass(frozen=True)
class Payoff:
    """
    kind:     'constant' (value), 'put' ((strike - x)^+), 'call' ((x - strike)^+)
              or 'identity' (scale * x)
    premium:  constant added on top, e.g. the cancellation premium of a game option
    """
    kind: str = "constant"
    value: float = 0.0
    strike: float = 0.0
    scale: float = 1.0
    premium: float = 0.0

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise InvalidArgumentError(f"unknown payoff kind '{self.kind}'; choose from {list(PAYOFF_KINDS)}")

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        s = scalar_state(x)
        if self.kind == "constant":
            base = np.full(s.shape, self.value)
        elif self.kind == "put":
            base = np.maximum(self.strike - s, 0.0)
        elif self.kind == "call":
            base = np.maximum(s - self.strike, 0.0)
        else:
            base = self.scale * s
        return base + self.premium

    def terminal(self, x: np.ndarray) -> np.ndarray:
        """Terminal value; payoffs are time-homogeneous."""
        return self(0.0, x)

    def with_premium(self, premium: float) -> Payoff:
        return Payoff(self.kind, self.value, self.strike, self.scale, self.premium + premium)


def build_payoff(spec: Mapping[str, Any]) -> Payoff:
    """Build a Payoff from a config mapping such as {"kind": "put", "strike": 100}."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind is None:
        raise InvalidArgumentError("payoff needs a 'kind'")
    unknown = set(spec) - {"value", "strike", "scale", "premium"}
    if unknown:
        raise InvalidArgumentError(f"unknown payoff parameters {sorted(unknown)}")
    return Payoff(kind=kind, **{k: float(v) for k, v in spec.items()})
