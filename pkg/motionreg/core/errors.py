from typing import Optional


class MotionRegError(Exception):
    """Base class for every error raised by motionreg."""


class InvalidInputError(MotionRegError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ParseError(MotionRegError, ValueError):
    """A file could not be decoded. `field` names the offending header field or section."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class UndefinedMetricError(MotionRegError, ValueError):
    """A metric is not defined for the given input (e.g. surface distance of an empty mask)."""


class ComputationError(MotionRegError, RuntimeError):
    """A numerical failure: non-finite values in a forward or backward pass."""

    def __init__(self, message: str, op: Optional[str] = None, position: Optional[tuple] = None):
        details = []
        if op:
            details.append(f"op={op}")
        if position is not None:
            details.append(f"position={position}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.op = op
        self.position = position


class ConfigError(InvalidInputError):
    """A preset, config file or command-line setting failed validation."""
