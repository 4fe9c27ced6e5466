"""Exception hierarchy shared across the package."""


class NeurofuseError(Exception):
    """Base class for all package errors."""


class DimensionError(NeurofuseError, ValueError):
    pass


class NumericError(NeurofuseError, ArithmeticError):
    pass


class ConfigError(NeurofuseError, ValueError):
    pass


class FormatError(NeurofuseError, ValueError):
    pass


class CapacityError(NeurofuseError, ValueError):
    pass


class ParcellationError(NeurofuseError, ValueError):
    pass


class StratificationError(NeurofuseError, ValueError):
    pass


class InputError(NeurofuseError, ValueError):
    pass


class MetricUndefinedError(NeurofuseError, ValueError):
    pass
