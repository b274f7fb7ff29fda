"""
Exception Hierarchy

All errors raised by the library derive from TrivlmError. Each one also
inherits the closest builtin so callers catching ValueError or OSError keep
working. Exit statuses used by main.py are attached as class attributes.
"""

from typing import Optional


class TrivlmError(Exception):
    """Base class for every library error."""

    exit_status = 1


class ShapeError(TrivlmError, ValueError):
    """Operand shapes disagree (names both shapes or the encoder and layer)."""


class NonFiniteError(TrivlmError, ValueError):
    """An operation received or produced NaN/inf where finiteness is promised."""


class GraphError(TrivlmError, RuntimeError):
    """Misuse of the differentiation graph."""


class ConfigError(TrivlmError, ValueError):
    """Invalid or inconsistent run configuration."""

    exit_status = 2


class DivergenceError(TrivlmError, ArithmeticError):
    """Training loss became non-finite.

    Attributes:
        step: Step at which the loss diverged
        model: Last model whose loss was finite (may be None)
    """

    exit_status = 3

    def __init__(self, message: str, step: int = -1, model=None):
        super().__init__(message)
        self.step = step
        self.model = model


class DegenerateLayerError(TrivlmError, ValueError):
    """Structural removal would leave a layer without any heads or neurons."""

    exit_status = 4

    def __init__(self, layer: str, unit: str, hint: Optional[str] = None):
        message = f"Layer '{layer}' would lose all of its {unit}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)
        self.layer = layer
        self.unit = unit
        self.hint = hint


class CheckpointError(TrivlmError, ValueError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the payload (corrupt or truncated file)."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not have the shape its embedded config implies."""


class CheckpointIOError(TrivlmError, OSError):
    """Reading or writing a checkpoint failed at the filesystem level."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
