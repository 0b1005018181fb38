"""Exception hierarchy shared by the ratinglab modules."""
from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised deliberately by ratinglab."""


class DomainError(LabError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class DimensionError(LabError, ValueError):
    """Array shapes or indices do not agree."""


class ArgumentError(LabError, ValueError):
    """A parameter is out of its documented range."""


class UnsupportedCombination(ArgumentError):
    """The requested combination of options has no implementation."""


class DataError(LabError, ValueError):
    """A dataset does not satisfy the requirements of an operation."""


class SchemaError(LabError, ValueError):
    """A serialized document is malformed."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericError(LabError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class TrainingAborted(NumericError):
    """Gradient descent hit a non-finite loss or gradient."""

    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step
