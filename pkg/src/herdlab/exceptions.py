__all__ = [
    "DataFormatError",
    "DegenerateRuleError",
    "DomainError",
    "HorizonNotReachedError",
    "InsufficientDataError",
]


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateRuleError(ValueError):
    """A weight rule or opinion vector makes a bound undefined.

    Raised when a factor of the varphi product is not positive, or when the
    majority rule has no unique winner.
    """


class InsufficientDataError(ValueError):
    """Too few ratings (or items) to evaluate the requested quantity."""


class HorizonNotReachedError(ValueError):
    """No rating index up to the search horizon satisfies the threshold."""

    def __init__(self, msg: str, threshold: float, horizon: int):
        super().__init__(msg)
        self.threshold = threshold
        self.horizon = horizon


class DataFormatError(ValueError):
    """A ratings file could not be parsed."""
