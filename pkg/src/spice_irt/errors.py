"""Exception types shared across the package."""


class SpiceError(Exception):
    """Base class for all package errors."""


class DomainError(SpiceError, ValueError):
    """An argument lies outside the admissible region of a function."""


class ValidationError(SpiceError, ValueError):
    """Input data or configuration failed validation."""

    def __init__(self, message: str, rows: list[int] | None = None):
        super().__init__(message)
        self.rows = list(rows or [])


class NumericalError(SpiceError, ArithmeticError):
    """A linear-algebra or sampling step produced an unusable result."""


class DiagnosticError(SpiceError):
    """A diagnostic cannot be computed for the given draws."""
