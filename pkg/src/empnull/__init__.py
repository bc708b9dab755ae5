"""Empirical-null estimation of cluster-level confounding from provider
summary statistics, with corrected z-scores and pseudo-Bayesian flagging.

The estimator never sees patient-level data: it consumes per-provider
observed/expected outcome totals, effective sizes, and provider-level
covariates, fits a robust truncated-normal likelihood for the confounding
effects and the latent provider variance, and re-scores providers with
corrected z statistics and confounding-adjusted measure-ratio posteriors.
A simulation laboratory reproduces the supporting bias, equivalence, and
flagging experiments at desk scale.
"""

from .errors import (
    BracketingError,
    DegenerateVarianceError,
    DegenerateWeightError,
    EmpnullError,
    FitFailureError,
    IngestionError,
    InvalidStartError,
    NoNullProvidersError,
    ScenarioError,
    SingularDesignError,
    ValidationError,
)
from .fitting import (
    EnFit,
    FitConfig,
    NullInterval,
    fit,
    log_likelihood,
    nelder_mead,
    null_intervals,
    sandwich_covariance,
)
from .io import IngestResult, ingest, parse_config
from .posterior import (
    BAYES_ADJUSTED,
    BAYES_NAIVE,
    FLAG_HIGH,
    FLAG_LOW,
    FLAG_NULL,
    FREQ_ADJUSTED,
    FREQ_NAIVE,
    METHODS,
    FlagDecision,
    LambdaPosterior,
    NuPosterior,
    PosteriorR,
    corrected_posterior,
    flag,
    lambda_posterior,
    nu_posterior,
    original_posterior,
)
from .robust import HuberResult, InitEstimate, huber_regression, initialize
from .simulate import (
    CreScenario,
    ReplicateMetrics,
    SimScenario,
    SimTruth,
    generate,
    generate_cre,
    run_replicates,
)
from .summaries import (
    ConfoundingParams,
    Family,
    NullMoments,
    ProviderArrays,
    ProviderSummary,
    corrected_z,
    corrected_z_many,
    naive_z,
    naive_z_many,
    null_moments,
    null_moments_many,
    stack_providers,
)

__version__ = "0.1.0"
