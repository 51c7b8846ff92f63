"""Exception hierarchy shared by every armflow module."""

from typing import Optional


class ArmflowError(Exception):
    """Base class for all armflow errors."""


class ContractViolationError(ArmflowError, ValueError):
    """A caller broke an operation's precondition."""


class ShapeMismatchError(ContractViolationError):
    """Operands disagree in shape or length."""


class UnsupportedOperationError(ArmflowError, TypeError):
    """A primitive is unknown or lacks the rule needed for this mode."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        message = f"unsupported primitive '{primitive}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class NumericError(ArmflowError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"{message} (batch index {index})"
        super().__init__(message)


class CapacityError(ArmflowError):
    """A context buffer or token stream outgrew max_tokens."""


class InvariantViolationError(ArmflowError, RuntimeError):
    """Internal state drifted out of sync (e.g. cache vs buffer)."""


class FormatError(ArmflowError, ValueError):
    """A file on disk is corrupt, truncated, or from another version."""


class ConfigError(ArmflowError, KeyError):
    """Unknown configuration key or invalid value."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class MissingArtifactError(ArmflowError, FileNotFoundError):
    """A checkpoint, dataset or generation file a command needs is absent."""


class EmbedderGateError(ArmflowError):
    """The frozen evaluator did not reach its accuracy gate."""
