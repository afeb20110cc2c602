"""Shared exception types."""


class OutOfDomainError(ValueError):
    """A query point lies outside the domain of a grid or scene."""


class CapacityError(RuntimeError):
    """A fixed-size resource (e.g. a texture atlas) cannot hold its payload."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to converge."""


class ValidationError(ValueError):
    """An input file, dataset, or argument failed validation."""
