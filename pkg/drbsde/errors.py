"""
Exception hierarchy for the engine.

Every error raised on purpose by drbsde derives from DRBSDEError so callers
(the CLI in particular) can separate numeric failures from bugs.
"""

from __future__ import annotations

from typing import Optional


class DRBSDEError(Exception):
    """Base class for all engine errors."""

    # Set by convergence studies when the failure happened at a penalty level
    penalty: Optional[int] = None


class InvalidArgumentError(DRBSDEError, ValueError):
    """An argument is outside its documented domain."""


class StepSizeTooLargeError(DRBSDEError):
    """(mu + n) * dt >= 1 at some grid node; the grid must be refined."""

    def __init__(self, message: str, node: Optional[int] = None, value: Optional[float] = None):
        super().__init__(message)
        self.node = node
        self.value = value


class UnderdeterminedRegressionError(DRBSDEError):
    """Fewer simulated paths than regression basis functions."""


class InconsistentBarriersError(DRBSDEError):
    """Barriers cross each other, or the terminal value leaves the band."""


class ConfigError(DRBSDEError):
    """A run configuration failed to parse or validate."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.field = field
        self.line = line
