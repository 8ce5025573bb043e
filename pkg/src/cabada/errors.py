"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class CabadaError(Exception):
    """Base class for all package errors."""


class ConfigError(CabadaError):
    """Invalid or inconsistent configuration."""


class DataError(CabadaError):
    """Malformed dataset, manifest, or shape violation."""


class NumericalError(CabadaError):
    """Non-finite values encountered during compute."""
