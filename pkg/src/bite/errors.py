"""Exception hierarchy shared across the toolkit."""


class BiteError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BiteError, ValueError):
    """Invalid configuration or inconsistent shapes."""


class DataError(BiteError):
    """Problems reading or validating trial data."""
