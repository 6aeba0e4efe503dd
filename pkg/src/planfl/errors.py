"""Exception hierarchy shared by every planfl module."""


class PlanError(Exception):
    """Base class for all planfl errors."""


class DimensionError(PlanError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(PlanError, ValueError):
    """A configuration or geometry constraint is violated."""


class DataError(PlanError, ValueError):
    """Input data is empty or malformed."""


class NumericError(PlanError, FloatingPointError):
    """Non-finite values reached an operation that cannot handle them."""


class ContractError(PlanError, RuntimeError):
    """An API precondition was violated by the caller."""


class ProtocolError(PlanError):
    """A frame, checkpoint or federation message is malformed or inconsistent."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class WarmupError(PlanError, RuntimeError):
    """Backbone warmup did not reach the required zero-shot accuracy."""
