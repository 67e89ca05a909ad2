"""Exception types shared across the package."""

from __future__ import annotations


class MGPVAEError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MGPVAEError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(MGPVAEError, ValueError):
    """A configuration file or dataset failed validation."""


class NumericalError(MGPVAEError, ArithmeticError):
    """A numerical routine failed (non-PD matrix, NaN, ...).

    ``jitter`` is the largest diagonal jitter tried (if any) and ``step`` the
    time index at which the failure was detected (if known).
    """

    def __init__(self, message: str, *, jitter: float | None = None, step: int | None = None,
                 segment: str | None = None):
        super().__init__(message)
        self.jitter = jitter
        self.step = step
        self.segment = segment
