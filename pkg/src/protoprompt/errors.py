"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine-specific errors."""


class ZeroNormError(EngineError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class FormatError(EngineError):
    """A binary file failed to parse. Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(EngineError):
    """Invalid or inconsistent configuration."""


class ShapeError(EngineError):
    """Mismatched array shapes or lengths."""


class DegenerateClassError(EngineError):
    """Class features cancel out; no prototype direction exists."""


class DuplicateClassError(EngineError):
    """A class id was introduced twice in a class-incremental stream."""


class MissingTokenError(EngineError):
    """No name token is registered for a class id."""


class NoDataError(EngineError):
    """A training task was started with no usable records."""


class NoClassesError(EngineError):
    """Prediction was requested before any class was learned."""


class EmptyEvalError(EngineError):
    """An accuracy was requested over zero test records."""
