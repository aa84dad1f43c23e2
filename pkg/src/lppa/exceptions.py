"""Exception hierarchy shared by every module of the package."""


class LPPAError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(LPPAError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(LPPAError, ArithmeticError):
    """A computation produced NaN or Inf."""


class TopologyError(LPPAError, ValueError):
    """A communication graph is malformed or not strongly connected."""


class ConvergenceError(LPPAError, RuntimeError):
    """An iterative routine exhausted its budget before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IngestionError(LPPAError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class PartitionError(LPPAError, RuntimeError):
    pass


class InitError(LPPAError, ValueError):
    pass


class BudgetError(LPPAError, ZeroDivisionError):
    pass


class SensitivityError(LPPAError, ValueError):
    pass


class ConfigError(LPPAError, ValueError):
    """Invalid experiment configuration."""
