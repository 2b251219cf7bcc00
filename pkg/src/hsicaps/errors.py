"""Exception hierarchy shared across the package."""


class HsiCapsError(Exception):
    """Base class for all package errors."""


class ConfigError(HsiCapsError):
    """Invalid or malformed configuration (CLI exit code 1)."""


class DataError(HsiCapsError):
    """Unreadable or inconsistent input data (CLI exit code 2)."""


class NumericError(HsiCapsError):
    """Non-finite values or failed numeric checks (CLI exit code 3)."""
