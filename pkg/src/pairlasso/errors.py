"""Exception types shared across the package."""


class PairLassoError(Exception):
    """Base class for all package errors."""


class InvalidArgument(PairLassoError, ValueError):
    """An argument is outside its documented domain."""


class InsufficientData(PairLassoError, ValueError):
    """Fewer observations than the computation needs (typically n < 2)."""


class SizeLimit(PairLassoError, ValueError):
    """A combinatorial computation was asked for beyond its supported size."""


class DataFormatError(PairLassoError, ValueError):
    """A data file could not be parsed.

    ``line`` is the 1-based line number of the offending row, if known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
