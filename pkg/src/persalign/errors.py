"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
runtime/numerical failures with 1.
"""


class PersalignError(Exception):
    """Base class for all package errors."""


class InvalidConfig(PersalignError, ValueError):
    """A configuration value is missing, malformed or out of range."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GapUnreachable(PersalignError):
    pass


class DimensionMismatch(PersalignError, ValueError):
    pass


class EmptyBank(PersalignError, ValueError):
    pass


class DegenerateBank(PersalignError, ValueError):
    pass


class EmptyDataset(PersalignError, ValueError):
    pass


class NumericalFailure(PersalignError, ArithmeticError):
    pass


class InsufficientPositivePoints(PersalignError, ValueError):
    pass


class InvalidMode(PersalignError, ValueError):
    pass
