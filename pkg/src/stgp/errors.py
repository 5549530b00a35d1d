"""Exception hierarchy.

Data problems derive from :class:`DataError` and numerical problems from
:class:`NumericalError`; the CLI maps them to exit codes 2 and 3.
"""


class StgpError(Exception):
    pass


class DataError(StgpError):
    pass


class NumericalError(StgpError):
    pass


class MalformedRow(DataError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class EmptyInput(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class EventOutsideDomain(DataError):
    pass


class TooFewPoints(DataError):
    pass


class LeakageError(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class CholeskyFailure(NumericalError):
    pass


class OptimizerDiverged(NumericalError):
    pass


class LineSearchFailure(NumericalError):
    pass


class UnboundedIntensity(NumericalError):
    pass
