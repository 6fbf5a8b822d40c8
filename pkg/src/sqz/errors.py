"""Exception taxonomy shared across the package."""


class SqzError(Exception):
    """Base class for all package-specific errors."""


class DomainError(SqzError, ValueError):
    """An argument is outside the supported domain of an operation."""


class ShapeError(DomainError):
    """Tensor or matrix shapes are inconsistent."""


class StateError(SqzError, RuntimeError):
    """An operation was called in an invalid order (e.g. backward before forward)."""


class FormatError(SqzError):
    """A file did not match its expected on-disk format."""


class UnsupportedFormatError(FormatError):
    """The file format was recognized but its encoding is not supported."""


class ConfigError(SqzError):
    """A configuration value or combination is invalid."""


class CheckpointError(SqzError):
    """A checkpoint failed to load, or its fingerprint does not match."""


class UsageError(SqzError):
    """Command-line arguments could not be parsed."""
