"""Exception types shared across the package."""


class FmchestError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(FmchestError, ValueError):
    pass


class DimensionError(FmchestError, ValueError):
    pass


class InvalidPilotError(FmchestError, ValueError):
    pass


class FormatError(FmchestError):
    """A persisted file does not match its declared layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ModelStateError(FmchestError, RuntimeError):
    pass


class TrainingError(FmchestError, RuntimeError):
    pass


class SamplerDivergenceError(FmchestError, RuntimeError):
    pass


class ConfigError(FmchestError):
    pass
