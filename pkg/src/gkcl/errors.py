"""Exception hierarchy shared by every gkcl module."""

from __future__ import annotations


class GKCLError(Exception):
    """Base class for all library errors."""


class DimensionError(GKCLError, ValueError):
    pass


class DomainError(GKCLError, ValueError):
    pass


class ParameterError(GKCLError, ValueError):
    pass


class NumericError(GKCLError, ArithmeticError):
    pass


class FactorizationError(NumericError):
    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (non-positive pivot at index {pivot})")


class KernelDegeneracyError(NumericError):
    pass


class GraphError(GKCLError, RuntimeError):
    pass


class ContextError(GKCLError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class ProtocolError(GKCLError, RuntimeError):
    pass


class ParseError(GKCLError, ValueError):
    pass


class CountMismatchError(ParseError):
    pass


class UndefinedMetricError(GKCLError, ValueError):
    pass


class ConfigError(GKCLError, ValueError):
    pass


class DatasetPathError(GKCLError, FileNotFoundError):
    pass
