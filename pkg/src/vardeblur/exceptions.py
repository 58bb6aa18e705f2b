"""Custom exceptions for the vardeblur library."""

from typing import Optional


class VarDeblurError(Exception):
    """Base exception for vardeblur library."""

    pass


class DimensionMismatchError(VarDeblurError, ValueError):
    """Raised when grids that must share dimensions do not."""

    pass


class ConfigError(VarDeblurError, ValueError):
    """Raised when a configuration value or parameter is invalid."""

    pass


class InsufficientFramesError(ConfigError):
    """Raised when a sequence has fewer frames than an operation needs."""

    pass


class SceneSpecError(ConfigError):
    """Raised when a synthetic scene description cannot be rendered."""

    pass


class FileFormatError(VarDeblurError):
    """Raised when a flow, sigma or image file is malformed."""

    pass


class NumericalAbortError(VarDeblurError, ArithmeticError):
    """Raised when the optimization state stops being finite."""

    def __init__(
        self,
        message: str,
        level: Optional[int] = None,
        round_index: Optional[int] = None,
    ):
        super().__init__(message)
        self.level = level
        self.round_index = round_index


class SolverDivergenceError(NumericalAbortError):
    """Raised when the conjugate gradient residual keeps growing."""

    pass
