"""Exception hierarchy shared by every module."""


class ExpFBFError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ExpFBFError, ValueError):
    pass


class NumericFailure(ExpFBFError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result.

    ``index`` carries the failing pivot or time step when one is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CapacityError(ExpFBFError, MemoryError):
    pass


class RankDeficiencyError(NumericFailure):
    pass


class RuleQualityError(ExpFBFError):
    """A quadrature rule failed to meet its moment constraints."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual
