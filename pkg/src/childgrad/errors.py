"""Exception types shared across the package."""


class ChildgradError(Exception):
    """Base class for all package errors."""


class ConfigError(ChildgradError):
    """Invalid configuration value or malformed config file."""


class ShapeError(ChildgradError):
    """Misaligned vectors or incompatible tensor shapes."""


class NumericError(ChildgradError):
    """Non-finite value encountered where finite math was required."""


class UndefinedOverlapError(ChildgradError):
    """Jaccard overlap requested between two empty index sets."""


class OutputExistsError(ChildgradError):
    """Output file already exists and --overwrite was not given."""
