"""Exception hierarchy shared by every module."""


class IdiomAdvError(Exception):
    """Base class for all package errors."""


class ShapeError(IdiomAdvError, ValueError):
    pass


class ContractError(IdiomAdvError, ValueError):
    pass


class NumericError(IdiomAdvError, FloatingPointError):
    pass


class TapeStateError(IdiomAdvError, RuntimeError):
    pass


class ConfigError(IdiomAdvError, ValueError):
    pass


class SchemaError(IdiomAdvError, ValueError):
    pass


class DataValueError(IdiomAdvError, ValueError):
    pass


class EncodingError(IdiomAdvError, ValueError):
    pass


class CheckpointError(IdiomAdvError):
    pass


class TrainingAborted(IdiomAdvError):
    """Raised when a loss goes non-finite; ``history`` holds every step so far."""

    def __init__(self, message, history=None, step=None):
        super().__init__(message)
        self.history = history
        self.step = step
