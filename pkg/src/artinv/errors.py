"""Exception hierarchy for the inversion toolkit.

Each pipeline stage raises a subclass of :class:`ArtinvError`; the CLI maps
the three broad families (config, data, numerical) onto exit codes.
"""


class ArtinvError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ArtinvError):
    """Invalid configuration or experiment selectors."""


class DataError(ArtinvError):
    """Malformed, missing or degenerate input data."""


class NumericalError(ArtinvError):
    """Non-finite values encountered during optimisation."""


class DegenerateSignal(DataError):
    pass


class TooShort(DataError):
    pass


class InvalidCutoff(ConfigError):
    pass


class DegenerateCoordinate(DataError):
    pass


class NegativeRadicand(DataError):
    pass


class ConstantChannel(DataError):
    pass


class ShapeError(DataError):
    pass


class PersistenceError(DataError):
    pass


class SelectorError(ConfigError):
    pass


class EmptyBatch(DataError):
    pass


class UndefinedCorrelation(DataError):
    pass


class EmptyEvaluation(DataError):
    pass


class LoadError(DataError):
    pass


class SchemaError(DataError):
    pass
