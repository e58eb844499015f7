"""Exception types raised across the package."""


class DeyoError(Exception):
    """Base class for all package errors."""


class NumericInputError(DeyoError, ValueError):
    pass


class DimensionError(DeyoError, ValueError):
    pass


class ConfigurationError(DeyoError, ValueError):
    pass


class StateError(DeyoError, RuntimeError):
    pass


class FormatError(DeyoError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
