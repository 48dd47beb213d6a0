class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InsufficientDataError(ValueError):
    """Too few bins, counts or samples for a meaningful fit."""


class InvariantError(RuntimeError):
    """An internal consistency check failed."""
