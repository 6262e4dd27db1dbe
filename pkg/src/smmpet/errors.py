"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a computation produces a non-finite or degenerate result."""


class ExtrapolationWarning(UserWarning):
    """Emitted when an input curve is evaluated beyond its last sample."""
