"""Exception hierarchy.

Validation problems (bad input files, schema mismatches) derive from
``ValidationError``; problems that arise while fitting derive from
``EstimationError``. The CLI maps the two families to different exit codes.
"""


class SfdecompError(Exception):
    """Base class for all package errors."""


class ValidationError(SfdecompError):
    pass


class InputError(ValidationError):
    """Empty or unreadable input."""


class SchemaError(ValidationError):
    pass


class CoercionError(ValidationError):
    """One or more cells could not be converted to their declared kind.

    ``issues`` holds ``(row, column, value)`` triples; ``row`` is the 1-based
    data row number (the header is row 0).
    """

    def __init__(self, issues):
        self.issues = list(issues)
        head = "; ".join(f"row {r}, column {c!r}: {v!r}" for r, c, v in self.issues[:10])
        more = f" (+{len(self.issues) - 10} more)" if len(self.issues) > 10 else ""
        super().__init__(f"type coercion failed at {head}{more}")


class DuplicationError(ValidationError):
    pass


class EmptySampleError(ValidationError):
    pass


class DesignError(ValidationError):
    """Rank-deficient or otherwise unusable design matrix."""

    def __init__(self, message, columns=()):
        self.columns = list(columns)
        super().__init__(message)


class ProfileError(ValidationError):
    pass


class DomainError(ValidationError, ValueError):
    pass


class EstimationError(SfdecompError):
    pass


class UnderdeterminedError(EstimationError):
    pass


class ClusterError(EstimationError):
    pass


class DegenerateError(EstimationError):
    pass


class SingularityError(EstimationError):
    pass


class EvaluationError(EstimationError):
    """Non-finite log-likelihood contribution; ``row`` is the offending index."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class ConvergenceError(EstimationError):
    pass


class PrecisionError(EstimationError):
    pass
