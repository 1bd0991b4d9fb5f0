# app/core/errors.py
from __future__ import annotations

from typing import Any, Optional


class OdometryError(Exception):
    """Base class for every failure raised by the engine."""

    exit_code: int = 1


class ContractViolation(OdometryError, ValueError):
    """Raised when a caller breaks a documented pre-condition."""


class OutOfWindowError(ContractViolation):
    """Raised when a timestamp falls outside the active spline segment."""

    def __init__(self, t: float, start: float, end: float) -> None:
        self.t = t
        self.start = start
        self.end = end
        super().__init__(f"t={t:.9f} outside active segment [{start:.9f}, {end:.9f})")


class ConfigError(OdometryError, ValueError):
    """Raised when a pipeline configuration fails validation."""

    exit_code = 2


class FormatParseError(OdometryError, ValueError):
    """Raised when an input row cannot be parsed."""

    exit_code = 2

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None) -> None:
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class StreamOrderError(FormatParseError):
    """Raised when stream timestamps are not monotone."""


class DivergenceError(OdometryError):
    """Raised when the filter state or covariance stops being finite or bounded."""

    exit_code = 3


class StreamGapError(OdometryError):
    """Raised when no measurement arrives for too many knots; carries a checkpoint."""

    exit_code = 4

    def __init__(self, message: str, checkpoint: Any = None) -> None:
        self.checkpoint = checkpoint
        super().__init__(message)


class ScenarioError(OdometryError, ValueError):
    """Raised when a synthetic scenario cannot be generated."""


class EvaluationError(OdometryError, ValueError):
    """Raised when two trajectories cannot be compared."""
