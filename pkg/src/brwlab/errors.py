"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 2,
InvariantViolation -> 3, CapacityError -> 4.
"""


class BRWError(Exception):
    pass


class ValidationError(BRWError):
    """Bad user input: config values, preconditions, malformed files."""


class InvariantViolation(BRWError):
    """A structural invariant failed at runtime. Always a bug, never data."""


class CapacityError(BRWError):
    """A configured resource cap (sites, nodes, attempts) was exceeded."""


class NotFoundError(BRWError):
    """A bounded search exhausted its budget without a hit.

    Carries whatever partial result the search produced so callers can
    report how close it got.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
