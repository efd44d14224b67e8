"""Exception types raised across the package."""


class EtvaeError(Exception):
    """Base class for all package errors."""


class ShapeError(EtvaeError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EtvaeError, ValueError):
    """A value lies outside an operation's domain (e.g. log of a negative)."""


class GradientError(EtvaeError, RuntimeError):
    """An optimizer step found a parameter without a gradient."""


class DataError(EtvaeError):
    """Dataset files are missing, malformed, or inconsistent."""


class ConfigError(EtvaeError, ValueError):
    """A configuration value violates its constraints."""


class CheckpointError(EtvaeError):
    """A checkpoint file is missing or does not match the model."""
