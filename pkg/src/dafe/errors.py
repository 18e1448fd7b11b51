"""Exception hierarchy shared by every module."""


class DafeError(Exception):
    """Base class for all library errors."""


class DimensionError(DafeError, ValueError):
    pass


class ParameterError(DafeError, ValueError):
    pass


class DataError(DafeError, ValueError):
    pass


class ContractError(DafeError, ValueError):
    pass


class ConfigError(DafeError, ValueError):
    pass


class FormatError(DafeError, ValueError):
    """Raised for malformed binary files; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
