"""Exception hierarchy shared by every mspcaps module."""

from typing import Optional


class MSPCapsError(Exception):
    """Base class for all errors raised by mspcaps."""


class ShapeError(MSPCapsError, ValueError):
    """Operand shapes are incompatible."""


class AxisError(MSPCapsError, ValueError):
    """A reduction or normalization axis is out of range."""


class DomainError(MSPCapsError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(MSPCapsError, ValueError):
    """A precondition of an operation is violated."""


class NumericError(MSPCapsError, ArithmeticError):
    """Non-finite values reached a computation that requires finite input."""


class NumericAbort(NumericError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}, loss={loss})")
        self.step = step
        self.lr = lr
        self.loss = loss


class FormatError(MSPCapsError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCheckpointError(MSPCapsError):
    """A checkpoint was written by another format version or model configuration."""


class ConfigError(MSPCapsError):
    """A run configuration could not be parsed or validated."""


class DataError(MSPCapsError):
    """Dataset files are missing or unusable."""
