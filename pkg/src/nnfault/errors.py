from __future__ import annotations


class NnFaultError(Exception):
    """Base class for every error raised by nnfault."""


class RangeExceeded(NnFaultError, ValueError):
    def __init__(self, index: int, value: float):
        super().__init__(f"element {index} = {value!r} is outside the quantizable range (-128, 128)")
        self.index = index
        self.value = value


class ShapeMismatch(NnFaultError, ValueError):
    pass


class IndexOutOfRange(NnFaultError, IndexError):
    pass


class ConflictingStuckAt(NnFaultError, ValueError):
    pass


class InvalidFault(NnFaultError, ValueError):
    pass


class UnknownLayer(NnFaultError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown layer"


class DoubleArm(NnFaultError, RuntimeError):
    pass


class NotArmed(NnFaultError, RuntimeError):
    pass


class EmptyDataset(NnFaultError, ValueError):
    pass


class NonDifferentiableLayer(NnFaultError, TypeError):
    pass


class StoreError(NnFaultError):
    pass


class SchemaVersionMismatch(StoreError):
    pass


class ForeignKeyViolation(StoreError):
    pass


class ConfigError(NnFaultError, ValueError):
    """Invalid run configuration; the CLI maps this to exit status 2."""
