"""Exception types raised across the package."""


class QtrendError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(QtrendError, ValueError):
    pass


class InvalidGridError(QtrendError, ValueError):
    pass


class DomainError(QtrendError, ValueError):
    pass


class ValidationError(QtrendError, ValueError):
    """Dataset or model validation failure.

    ``offending`` lists the indices (or ``(i, j)`` pairs) that failed.
    """

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class NumericalBreakdown(QtrendError, ArithmeticError):
    """Banded Cholesky factorization failed at ``pivot``."""

    def __init__(self, message, pivot=None, iteration=None):
        super().__init__(message)
        self.pivot = pivot
        self.iteration = iteration


class CalibrationError(QtrendError, RuntimeError):
    pass
