"""Exception hierarchy shared across the package."""


class EmpnullError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EmpnullError, ValueError):
    """Bad or inconsistent input values."""


class DegenerateVarianceError(EmpnullError):
    """A null-variance formula produced a nonpositive value.

    Carries the offending provider id so callers can locate the input.
    """

    def __init__(self, provider_id, variance):
        self.provider_id = provider_id
        self.variance = variance
        super().__init__(
            f"nonpositive null variance {variance!r} for provider {provider_id!r}"
        )


class SingularDesignError(EmpnullError):
    """Design matrix is rank-deficient."""


class InvalidStartError(EmpnullError):
    """Optimizer started at a point where the objective is -inf."""


class NoNullProvidersError(EmpnullError):
    """Every z-score fell outside its null interval; the model is unidentifiable."""


class FitFailureError(EmpnullError):
    """All candidate optimizations failed.  Carries per-candidate diagnostics."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or []
        super().__init__(message)


class DegenerateWeightError(EmpnullError):
    """A sandwich weight (error-variance estimate) was nonpositive."""


class BracketingError(EmpnullError):
    """Quantile root-finding could not bracket the target probability."""


class ScenarioError(EmpnullError):
    """A simulation scenario is invalid or would overflow the generator."""


class IngestionError(EmpnullError):
    """A summary file could not be parsed.  Names the row/column when known."""
