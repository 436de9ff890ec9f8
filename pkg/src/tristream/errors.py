"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ValidationError -> 2,
DataIOError -> 3, NumericalError -> 4.
"""


class TriStreamError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(TriStreamError):
    """Bad input: shapes, ranges, labels, manifest rows, config values."""


class DimensionError(ValidationError):
    """Tensor/image dimensions do not agree; message names the offending axes."""


class EmptyRegionError(ValidationError):
    """An operation that needs a nonempty mask/region received an empty one."""


class DataIOError(TriStreamError):
    """File missing, unreadable, corrupt, or unwritable."""


class NumericalError(TriStreamError):
    """Non-finite values where finite ones are required (NaN loss, inf grad)."""
