"""Exception hierarchy shared by all modules."""


class DTRError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(DTRError, ValueError):
    """Mismatched grids, action sets or parameter dimensions."""


class EvaluationError(DTRError, ArithmeticError):
    """A Q-value or loss could not be evaluated to a finite number."""


class InvalidRecordError(DTRError, ValueError):
    """A data record violates its invariants (e.g. nonpositive propensity)."""


class SingularIndexError(DTRError, ValueError):
    """A power index hit a singular value that has a dedicated limit form."""


class DegenerateInstanceError(DTRError, ValueError):
    """An instance lacks a property a limit identity requires (e.g. unique argmax)."""


class DegenerateDataError(DTRError, ValueError):
    """The data cannot support the requested fit (e.g. an action never observed)."""


class ConsistencyError(DTRError, RuntimeError):
    """An internal numerical invariant was violated beyond rounding."""


class HarnessError(DTRError, RuntimeError):
    """Replication harness failure; ``report`` holds whatever was computed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
