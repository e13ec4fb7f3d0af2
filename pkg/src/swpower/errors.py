"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SwpowerError(Exception):
    """Base class for all package errors."""


class ValidationError(SwpowerError, ValueError):
    """Input violates a documented precondition."""


class IdentifiabilityError(ValidationError):
    """Fixed effects or variance components cannot be estimated from the data."""


class SingularMatrixError(SwpowerError, ArithmeticError):
    """A matrix that must be positive definite failed Cholesky factorization."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        msg = f"matrix {name!r} is not positive definite"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DegenerateLimitError(SingularMatrixError):
    """Limiting variance undefined because within- and between-period ICCs coincide."""


class InfeasibleError(SwpowerError):
    """No design within the search caps reaches the target power."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best
