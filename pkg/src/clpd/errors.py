"""Exception types shared across the toolkit."""


class ClpdError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(ClpdError, ValueError):
    """Unknown setting, bad hyperparameter or mismatched configuration."""


class ShapeError(ClpdError, ValueError):
    """Array shapes do not match what an operation expects."""


class NumericError(ClpdError, FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class DivergenceError(NumericError):
    """An iterative method produced non-finite iterates.

    ``index`` names the iteration (or step, epoch/batch) where it happened.
    """

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index
