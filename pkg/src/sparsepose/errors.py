"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class SparsePoseError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SparsePoseError):
    """Invalid or inconsistent configuration."""


class DataError(SparsePoseError):
    """Missing, malformed or mismatched input data."""


class NumericalError(SparsePoseError):
    """Numerical failure (NaN gradients, degenerate inputs, ...)."""
