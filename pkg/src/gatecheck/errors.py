"""Shared exception types.

Every "defined failure" in the package raises one of these instead of
returning a sentinel, so callers can distinguish bad input from bad state.
"""

from __future__ import annotations


class GatecheckError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(GatecheckError, ValueError):
    """Input is structurally valid but statistically degenerate.

    Examples: a constant sequence fed to a rank correlation, a single-class
    label vector fed to AUC, a zero row/column marginal in a contingency
    table, a rank-deficient regression design.
    """


class ConvergenceError(GatecheckError, RuntimeError):
    """An iterative solver failed to converge within its budget.

    Carries the last iterate and gradient norm so the failure is inspectable.
    """

    def __init__(self, message: str, last_iterate=None, gradient_norm: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm


class DataFormatError(GatecheckError, ValueError):
    """A data file violates its wire format; message names the line."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class ConfigError(GatecheckError, ValueError):
    """An experiment configuration is invalid; message names the key."""
