"""Exception hierarchy shared by the simulator modules."""

from __future__ import annotations


class NGDError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgument(NGDError, ValueError):
    pass


class TopologyGenerationFailure(NGDError):
    pass


class NumericalFailure(NGDError):
    """An eigen/iterative solver did not converge.

    ``best_estimate`` carries whatever the solver had when it gave up.
    """

    def __init__(self, message: str, best_estimate: float | None = None):
        super().__init__(message)
        self.best_estimate = best_estimate


class NumericOverflow(NGDError, ArithmeticError):
    pass


class SingularMatrix(NGDError):
    pass


class SingularOmega(SingularMatrix):
    pass


class SolverFailure(NGDError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Diverged(NGDError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(NGDError, ValueError):
    pass


class SchemaVersionMismatch(NGDError):
    def __init__(self, expected: int, found):
        super().__init__(f"result schema version mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found
