"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericalError -> 3.
"""


class AmtennetError(Exception):
    """Base class for all package errors."""


class ShapeError(AmtennetError):
    """A tensor or layer received incompatibly shaped data."""


class DataError(AmtennetError):
    """A corpus, manifest, or checkpoint is missing, malformed, or invalid."""


class NumericalError(AmtennetError):
    """A computation produced non-finite values or an undefined quantity."""


class CheckpointError(DataError):
    """A checkpoint file failed validation (magic, version, or block layout)."""
