"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes disagree; the message names the offending axis."""


class PreconditionError(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """A computation produced (or received) a non-finite value."""


class ParseError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(RuntimeError):
    """Training aborted; carries the epoch at which it failed."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible with the request."""


class UnsupportedOperationError(RuntimeError):
    """The model variant does not support the requested operation."""
