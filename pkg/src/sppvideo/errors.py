"""Exception types shared across the package.

Error policy: configuration problems (bad shapes, invalid settings) raise
ConfigurationError, misuse of an API surface raises UsageError, and any
operation that would produce or consume non-finite values raises
NumericError immediately instead of letting NaNs propagate.
"""


class SppError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SppError):
    """Invalid configuration: incompatible shapes, bad hyperparameters."""


class UsageError(SppError):
    """An API was called in an unsupported way (e.g. non-scalar backward)."""


class NumericError(SppError):
    """A numeric operation produced or received non-finite values."""


class ChecksumError(SppError):
    """A serialized artifact failed its integrity check."""
