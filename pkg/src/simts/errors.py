"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ShapeError -> 4.
"""


class SimtsError(Exception):
    """Base class for all package errors."""


class ConfigError(SimtsError):
    """Bad configuration key or value."""


class DataError(SimtsError):
    """Unreadable, unparsable, or non-finite input data."""


class ShapeError(SimtsError):
    """Dimension mismatch between arrays, models, or datasets."""
