"""Exception hierarchy shared across the package.

Two failure families matter to callers: problems with input data or files
(``DataError``) and numerical breakdowns during computation
(``NumericalError``).  The command-line client maps them to distinct exit
codes (2 and 3); the HTTP layer maps them to 400 and 500 responses.
"""


class ShapeHashError(Exception):
    """Base class for every error raised by this package."""


class DataError(ShapeHashError):
    """Malformed, missing, or inconsistent input data."""


class MalformedHeaderError(DataError):
    """A file header does not match its declared format."""


class TruncatedPayloadError(DataError):
    """A file ends before its declared payload is complete."""


class ZeroDimensionError(DataError):
    """An image or matrix declares a zero width or height."""


class FormatVersionError(DataError):
    """A file carries an unknown magic string or format version."""


class ManifestError(DataError):
    """A dataset manifest is missing columns, rows, or valid split tags."""


class FilterConfigurationError(DataError):
    """A prototype image yields no keypoints on any configured circle."""


class NumericalError(ShapeHashError):
    """A computation produced values outside its valid domain."""


class ZeroVectorError(NumericalError):
    """A vector that must have positive norm is identically zero."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss and cannot continue."""
