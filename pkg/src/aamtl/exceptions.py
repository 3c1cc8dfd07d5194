"""Exception hierarchy shared by all modules."""


class AAMError(Exception):
    """Base class for errors raised by aamtl."""


class DegenerateInputError(AAMError, ValueError):
    """Too few samples, or samples without usable spread."""


class DimensionError(AAMError, ValueError):
    """Arrays whose sizes do not agree."""


class DegenerateGeometryError(AAMError, ValueError):
    """Collinear or coincident landmark configurations."""


class ParseError(AAMError, ValueError):
    """Malformed landmark or manifest text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CountMismatchError(ParseError):
    pass


class HeaderError(ParseError):
    pass


class CoordinateError(ParseError):
    pass


class ModelFormatError(AAMError):
    """Base class for model container failures."""


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class ConfigError(AAMError, ValueError):
    """Bad configuration: unknown keys, missing paths, out-of-range values."""
