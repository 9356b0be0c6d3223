"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and argument
problems exit 1, numeric failures exit 2, file format and IO problems
exit 3.
"""

from __future__ import annotations


class WarmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(WarmError, ValueError):
    """Invalid or inconsistent configuration."""


class ArgumentError(WarmError, ValueError):
    """An operation was called with arguments violating its contract."""


class SymmetryError(ArgumentError):
    """A matrix required to be symmetric is not."""


class EmptyClassError(ArgumentError):
    """A class has no points where at least one is required."""


class InsufficientPointsError(ArgumentError):
    """Too few points for a statistic (covariance needs at least two rows)."""


class UndefinedMetricError(ArgumentError):
    """A metric is undefined for the given inputs."""


class CheckpointError(ArgumentError):
    """Checkpoint file is malformed or inconsistent with the run."""


class NumericError(WarmError, ArithmeticError):
    """Numerical failure: non-finite values or non-convergence."""


class FormatError(WarmError, ValueError):
    """Episode container violates the binary format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
