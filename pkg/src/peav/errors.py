"""Exception hierarchy shared by every module."""


class PeavError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PeavError, ValueError):
    pass


class DomainError(PeavError, ValueError):
    pass


class ParameterError(PeavError, ValueError):
    pass


class ConfigurationError(PeavError, ValueError):
    pass


class NumericError(PeavError, ArithmeticError):
    """Raised when a non-finite value shows up during training."""


class FormatError(PeavError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
