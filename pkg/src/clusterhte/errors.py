"""Exception hierarchy shared by every module."""


class HteError(Exception):
    """Base class for all package errors."""


class DataError(HteError):
    """Input data violates a contract (bad values, missing exposures, overlap)."""


class SchemaError(DataError):
    """A CSV schema names a column that does not exist."""


class ParseError(DataError):
    """A CSV cell could not be parsed as a number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class NumericalError(HteError):
    """A statistic could not be computed (empty cells, nonpositive variances)."""


class UndefinedPointError(NumericalError):
    """An estimator is undefined at an evaluation point because a cell is empty."""

    def __init__(self, x, pi, t):
        super().__init__(f"empty propensity cell at x={x!r}, pi={pi!r}, t={t}")
        self.x = x
        self.pi = pi
        self.t = t
