"""Exception types shared across the package.

CLI exit-code mapping: UsageError -> 1, NumericalFailureError and
TrainingQualityError -> 2, everything else is a bug.
"""


class DynvlaError(Exception):
    """Base class for package errors."""


class ShapeError(DynvlaError):
    """Tensor/grid dimensions do not match what the model expects."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ValidationError(DynvlaError):
    """A spec/config value is outside its documented domain."""


class NumericalFailureError(DynvlaError):
    """Non-finite values appeared during optimization."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingQualityError(DynvlaError):
    """A trained model missed its held-out accuracy bar."""


class FixtureError(DynvlaError):
    """A bundled fixture file is missing or fails its pinned hash."""


class UsageError(DynvlaError):
    """Bad CLI arguments or run configuration."""
