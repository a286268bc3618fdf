"""Exception types raised by the filtering library."""

from __future__ import annotations


class MpfError(Exception):
    """Base class for library errors."""


class RankDeficiencyError(MpfError, ValueError):
    """Observation matrix is not of full row rank."""

    def __init__(self, message: str, time_index: int | None = None):
        if time_index is not None:
            message = f"{message} (time index {time_index})"
        super().__init__(message)
        self.time_index = time_index


class ConditioningError(MpfError, ValueError):
    """A covariance or precision matrix failed a positive-definiteness check."""


class UnsupportedParameterizationError(MpfError, ValueError):
    """The requested filter cannot be used at this noise level."""


class PathDivergenceError(MpfError, FloatingPointError):
    """A guided path produced non-finite states."""

    def __init__(self, step: int):
        super().__init__(f"guided path diverged at grid step {step}")
        self.step = step


class WeightCollapseError(MpfError):
    """All importance weights are zero (log-weights all -inf or nan)."""

    def __init__(self, time_index: int | None = None, snapshot: dict | None = None):
        msg = "all importance weights collapsed"
        if time_index is not None:
            msg += f" at time {time_index}"
        super().__init__(msg)
        self.time_index = time_index
        self.snapshot = snapshot or {}


class LinearizationError(MpfError, ValueError):
    """Jacobian of the auxiliary process is singular or not diagonalizable."""
