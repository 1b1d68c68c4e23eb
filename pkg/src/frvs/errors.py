"""Exception types shared across the package."""


class FrvsError(Exception):
    """Base class for package errors."""


class DomainError(FrvsError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class NumericalError(FrvsError, RuntimeError):
    """A numerical routine failed beyond recoverable tolerances."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class InputError(FrvsError, ValueError):
    """Malformed user-supplied data (files, configs)."""
