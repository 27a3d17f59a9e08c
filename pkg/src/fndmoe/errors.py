"""Exception hierarchy shared by every module."""


class FndMoeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FndMoeError, ValueError):
    """A caller passed a value outside an operation's domain."""


class ShapeError(InvalidArgumentError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.shapes = shapes
        pretty = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class ConfigError(FndMoeError, ValueError):
    """A configuration object violates its invariants."""


class DataError(FndMoeError):
    """Input data is malformed or inconsistent with the configuration."""


class InternalError(FndMoeError, RuntimeError):
    """An internal guarantee was violated (a bug, not bad input)."""
