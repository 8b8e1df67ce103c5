"""Exception types shared across the package."""


class HandsegError(Exception):
    """Base class for every error raised by handseg."""


class ContractError(HandsegError, ValueError):
    """An argument violated a documented precondition (shape, range, ...)."""


class StateError(HandsegError, RuntimeError):
    """An operation was called in the wrong state, e.g. backward without forward."""


class DataError(HandsegError, ValueError):
    """Input data is unusable (non-finite coordinates, empty sequences)."""


class ParseError(DataError):
    """A dataset line could not be parsed.

    The 1-based ``lineno`` is kept on the instance.
    """

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SchemaError(ParseError):
    """A dataset record parsed but does not match the expected layout."""


class SplitError(DataError):
    """A dataset cannot be split as requested."""


class TrainingError(HandsegError, RuntimeError):
    """Training diverged or otherwise failed."""


class CheckpointError(HandsegError, ValueError):
    """A checkpoint file is malformed or does not match the requested model."""
