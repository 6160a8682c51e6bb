"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the physically or numerically valid domain."""


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class ConditioningError(ArithmeticError):
    """A matrix or determinant too close to singular to use."""


class SeedingError(RuntimeError):
    """Cloud seeding could not satisfy the requested point budget."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss.

    Carries the last finite iterate so callers can salvage it.
    """

    def __init__(self, message, iteration=None, cloud=None):
        super().__init__(message)
        self.iteration = iteration
        self.cloud = cloud
