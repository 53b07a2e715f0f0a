"""Exception types shared across the toolkit."""

from __future__ import annotations


class PrunekitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PrunekitError, ValueError):
    """Operands have incompatible shapes."""


class NumericError(PrunekitError, ValueError):
    """Non-finite values where finite ones are required, or a NaN loss."""


class ConfigError(PrunekitError, ValueError):
    """Invalid configuration (model, scorer, recipe, or stage ordering)."""


class SequenceLengthError(PrunekitError, ValueError):
    """A token sequence exceeds the model's position budget."""


class LayerNotFoundError(PrunekitError, KeyError):
    """A layer id does not exist in the model."""


class StateError(PrunekitError, RuntimeError):
    """An operation was applied to a model in the wrong state
    (double-attach, double-quantize, merge into quantized base, ...)."""


class CheckpointError(PrunekitError, ValueError):
    """Malformed checkpoint file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StageFailure(PrunekitError, RuntimeError):
    """A recipe stage raised; the manifest records the failure."""
