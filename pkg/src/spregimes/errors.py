"""Exception hierarchy shared by all modules."""


class SpRegimesError(Exception):
    """Base class for errors raised by spregimes."""


class ConfigError(SpRegimesError, ValueError):
    """Invalid configuration, model spec or scenario file."""


class DataError(SpRegimesError, ValueError):
    """Malformed or invalid input data."""


class NumericalError(SpRegimesError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class RankError(NumericalError):
    """A design or instrument matrix is (numerically) rank deficient."""
