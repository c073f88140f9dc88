"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates the operation's precondition."""


class InsufficientDataError(ValueError):
    """A window or series is too short for the requested statistic."""


class UndefinedRateError(ValueError):
    """A rate or ratio has an empty denominator."""


class InfeasibleProblemError(ValueError):
    """The portfolio constraint set is empty.

    ``constraint`` names the constraint family that cannot be met.
    """

    def __init__(self, message: str, constraint: str):
        super().__init__(message)
        self.constraint = constraint


class ConfigError(ValueError):
    """Configuration failed validation; ``errors`` holds ``field: message`` lines."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)
