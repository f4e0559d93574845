"""
Error types raised across the laboratory.

Validation problems derive from ValueError, numerical failures from
RuntimeError, so callers that only know the builtin hierarchy still work.
Handles catch `QssepError` and render it as a `# error:` report.
"""

from typing import List, Optional, Sequence


class QssepError(Exception):
    """Base class for every error raised by qssep_lab."""


class SizeLimitError(QssepError, ValueError):
    """An operation was asked for a size beyond its hard cap."""

    def __init__(self, what: str, value: int, limit: int):
        self.what = what
        self.value = value
        self.limit = limit
        super().__init__(f"{what}={value} exceeds the limit {limit}")


class InvalidArgumentError(QssepError, ValueError):
    pass


class DomainError(QssepError, ValueError):
    pass


class ConfigError(QssepError, ValueError):
    """Invalid configuration value, reported with its field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class NumericalBlowupError(QssepError, RuntimeError):
    def __init__(self, step: int, message: str = "non-finite entries"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class SolverError(QssepError, RuntimeError):
    """Iterative solver failure with its residual history."""

    def __init__(self, message: str, residuals: Optional[Sequence[float]] = None, z: Optional[complex] = None):
        self.residuals: List[float] = list(residuals or [])
        self.z = z
        detail = message
        if z is not None:
            detail += f" (z={z})"
        if self.residuals:
            detail += f"; last residual {self.residuals[-1]:.3e} after {len(self.residuals)} iterations"
        super().__init__(detail)


class SingularityError(SolverError):
    pass


class DegeneracyError(QssepError, RuntimeError):
    pass


class InvariantViolation(QssepError, RuntimeError):
    """A property checked by an experiment did not hold."""
