"""Exception hierarchy shared by the library and the CLI."""


class WeightShareError(Exception):
    """Base class for every error raised by weightshare."""

    exit_code = 1


class ConfigError(WeightShareError):
    """Invalid configuration file, registry entry or option combination."""

    exit_code = 1


class ShapeError(WeightShareError, ValueError):
    """Incompatible tensor shapes or input lengths."""

    exit_code = 3


class DataError(WeightShareError):
    """Missing, malformed or insufficient data."""

    exit_code = 2


class NumericalError(WeightShareError):
    """NaN/inf values or degenerate numerics during training or evaluation."""

    exit_code = 3


class StatisticsError(WeightShareError, ValueError):
    """A statistical test cannot be computed for the given sample."""

    exit_code = 2
