"""Exception types shared across the package."""


class AttnMilError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(AttnMilError):
    """Operands have incompatible shapes; the message carries a shape report."""


class DegenerateFieldError(AttnMilError):
    """A value field has too little spread to be split into two groups."""


class NumericError(AttnMilError):
    """A computation produced a non-finite value or was used out of domain."""


class UndefinedMetricError(AttnMilError):
    """A metric has no defined value for the given inputs."""


class DataFormatError(AttnMilError):
    """Base class for errors while reading serialized samples or models."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataFormatError):
    """File ends before the payload promised by its header."""


class DimOverflowError(DataFormatError):
    """Header dimensions are zero or unreasonably large."""


class UnsupportedVersionError(DataFormatError):
    """File version byte is not one this code understands."""
