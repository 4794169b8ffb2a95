"""Exception types shared across the codec.

Each subclasses ValueError so callers written against plain ValueError keep
working; the CLI maps them onto exit codes.
"""

from __future__ import annotations


class EVCError(ValueError):
    """Base class for codec errors."""


class ShapeError(EVCError):
    """Tensor extents do not agree with what an op needs."""


class ValidationError(EVCError):
    """An argument or configuration value is out of range."""


class SequencingError(EVCError):
    """An operation ran before the state it depends on exists."""


class StructuralError(EVCError):
    """A model cannot be rewritten into the requested structure."""


class TapeError(EVCError):
    """The computation tape is internally inconsistent."""


class NonFiniteError(EVCError):
    """A loss or objective evaluated to NaN or infinity."""


class MetricUndefinedError(EVCError):
    """A metric has no defined value for the given inputs."""


class DecodeError(EVCError):
    """A bitstream could not be parsed or decoded."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
