"""Exception hierarchy shared by every module."""


class DiffestError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffestError, ValueError):
    pass


class DomainError(DiffestError, ValueError):
    """A kernel was evaluated outside its domain of definition."""


class NumericalError(DiffestError, ArithmeticError):
    pass


class ShapeError(DiffestError, ValueError):
    pass


class DomainEscapeError(DiffestError):
    """A particle or query point left the region covered by the density grid."""

    def __init__(self, message, time=None, index=None):
        super().__init__(message)
        self.time = time
        self.index = index


class StepSizeError(DiffestError):
    pass


class PositivityError(DiffestError):
    pass


class ResolutionError(DiffestError):
    pass


class MissingDataError(DiffestError):
    pass


class PlanError(DiffestError):
    pass


class SchemaError(DiffestError):
    pass
