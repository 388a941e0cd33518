"""Exception hierarchy shared across hlqkit."""


class HlqError(Exception):
    """Base class for all hlqkit errors."""


class ConfigError(HlqError, ValueError):
    """Invalid configuration value (bit width, group size, ...)."""


class DataError(HlqError, ValueError):
    """Malformed input data: wrong shapes, non-finite entries."""


class CalibrationError(HlqError, ValueError):
    pass


class NumericalError(HlqError, ArithmeticError):
    pass


class TuningError(HlqError, RuntimeError):
    pass


class CorruptContainerError(HlqError, ValueError):
    pass
