"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid or infeasible."""


class FormatError(ValueError):
    """A serialized file is malformed."""


class DegenerateStatsError(ValueError):
    """Estimated patch statistics are unusable (zero spread)."""


class EmptyBinError(ValueError):
    """A neuron pair carries no gradient signal; the bin is empty."""
