"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class DstlError(Exception):
    """Base class for all package errors."""


class ParameterError(DstlError, ValueError):
    """An operation received an out-of-range or inconsistent parameter."""


class InputError(DstlError, ValueError):
    """Runtime inputs (shapes, lengths) do not match the expected contract."""


class ConfigError(DstlError):
    """A run configuration is invalid or inconsistent."""


class DataError(DstlError):
    """A dataset file is missing or malformed."""


class FormatError(DataError):
    """A binary file does not parse under its declared format."""


class NumericalError(DstlError):
    """A non-finite value was encountered where finiteness is required."""
