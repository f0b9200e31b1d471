"""Exception hierarchy shared by all dfgp modules."""


class DFGPError(Exception):
    """Base class for every error raised by this package."""


# numeric core
class ShapeError(DFGPError, ValueError):
    pass


class NumericError(DFGPError, ArithmeticError):
    pass


class TapeError(DFGPError, RuntimeError):
    pass


# linalg
class NotPositiveDefiniteError(NumericError):
    pass


class SingularError(NumericError):
    pass


# model
class ConfigError(DFGPError, ValueError):
    pass


class DomainError(DFGPError, ValueError):
    pass


class UnknownSeriesError(DFGPError, KeyError):
    pass


# data
class DataError(DFGPError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GapError(DataError, ValueError):
    pass


class LengthError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    pass


# metrics
class DegenerateNormalizerError(DFGPError, ZeroDivisionError):
    pass
