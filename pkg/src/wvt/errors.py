"""Exception types shared across the package."""


class WvtError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(WvtError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(WvtError):
    """A configuration value is invalid or inconsistent."""


class InputError(WvtError):
    """Input data violates a documented precondition."""


class ParseError(WvtError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(WvtError):
    """A computation produced non-finite values."""
