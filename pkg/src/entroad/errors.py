"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data/format problems exit 2, numerical failures exit 3.
"""


class EntroadError(Exception):
    """Base class for all package errors."""


class ConfigError(EntroadError):
    """Invalid configuration value or unknown config key."""


class DataError(EntroadError):
    """Input data violates a documented invariant."""


class FormatError(DataError):
    """Malformed serialized file (bad magic, truncation, corrupt tensor)."""


class NumericalError(EntroadError):
    """Non-finite values or a numerically impossible request."""
