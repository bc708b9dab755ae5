"""Provider summary data model, outcome families, and z-score moments.

A provider's public report reduces to a handful of numbers: the observed
outcome total O, the expected total E from the patient-level risk model,
the effective size (the summed variance function over the provider's
caseload), and a vector of provider-level covariates W.  The naive
z-score ``(O - E) / sqrt(dispersion * effective_size)`` adjusts only for
patient mix.  For an average-quality provider its conditional mean and
variance are driven by the cluster-level confounding parameters
``(nu, sigma2_alpha)`` through family-specific formulas:

* normal outcomes:       mean = sqrt(n / s2e) * W'nu,  var = 1 + (s2a/s2e) * n
* (quasi-)Poisson:       mean = sqrt(neff/a) * (exp(W'nu + s2a/2) - 1),
                         var  = g * (1 + g * (exp(s2a) - 1) * neff/a),
                         with g = exp(W'nu + s2a/2)
* generic exp. family:   mean = sqrt(neff/a) * W'nu,
                         var  = 1 + (b3_sum/neff) * W'nu + (s2a/a) * neff
                         (first-order expansion; can go nonpositive, which
                         is reported as an error rather than clamped)

Everything here is pure and safe for concurrent use; batch variants
operate on pre-stacked arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateVarianceError, ValidationError

NORMAL = "normal"
POISSON = "poisson"
QUASI_POISSON = "quasi-poisson"
EXP_FAMILY = "exp-family"

FAMILY_KINDS = (NORMAL, POISSON, QUASI_POISSON, EXP_FAMILY)


@dataclass(frozen=True)
class Family:
    """Outcome-distribution family plus its (prespecified) dispersion.

    ``dispersion`` is sigma^2_eps for normal outcomes, exactly 1 for
    Poisson, the overdispersion factor for quasi-Poisson, and the generic
    nuisance value otherwise.  It is never estimated.
    """

    kind: str
    dispersion: float = 1.0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValidationError(f"unknown family kind {self.kind!r}")
        d = float(self.dispersion)
        if not math.isfinite(d) or d <= 0:
            raise ValidationError(f"dispersion must be positive, got {self.dispersion!r}")
        if self.kind == POISSON and d != 1.0:
            raise ValidationError("Poisson family forces dispersion = 1")
        object.__setattr__(self, "dispersion", d)

    @classmethod
    def normal(cls, sigma2_eps: float = 1.0) -> "Family":
        return cls(NORMAL, sigma2_eps)

    @classmethod
    def poisson(cls) -> "Family":
        return cls(POISSON, 1.0)

    @classmethod
    def quasi_poisson(cls, psi: float) -> "Family":
        return cls(QUASI_POISSON, psi)

    @classmethod
    def exp_family(cls, dispersion: float) -> "Family":
        return cls(EXP_FAMILY, dispersion)


def _finite_or_raise(name, value):
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return v


@dataclass(frozen=True)
class ProviderSummary:
    """One provider's public statistics.

    ``observed`` may be negative for continuous (normal) outcomes, where it
    is a sum rather than a count.  ``n_patients`` is required for the
    normal family; ``b3_sum`` (the summed third derivative of the cumulant
    function at the null linear predictor) only for the generic
    exponential-family approximation -- it equals ``effective_size`` for
    Poisson outcomes.
    """

    id: str
    observed: float
    expected: float
    effective_size: float
    covariates: tuple[float, ...] = ()
    n_patients: int | None = None
    b3_sum: float | None = None

    def __post_init__(self):
        obs = _finite_or_raise("observed", self.observed)
        exp_ = _finite_or_raise("expected", self.expected)
        eff = _finite_or_raise("effective_size", self.effective_size)
        if eff <= 0:
            raise ValidationError(f"effective_size must be positive for provider {self.id!r}")
        cov = tuple(_finite_or_raise("covariate", c) for c in self.covariates)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "expected", exp_)
        object.__setattr__(self, "effective_size", eff)
        object.__setattr__(self, "covariates", cov)
        if self.n_patients is not None:
            n = int(self.n_patients)
            if n <= 0:
                raise ValidationError(f"n_patients must be positive for provider {self.id!r}")
            object.__setattr__(self, "n_patients", n)
        if self.b3_sum is not None:
            object.__setattr__(self, "b3_sum", _finite_or_raise("b3_sum", self.b3_sum))


@dataclass(frozen=True)
class ConfoundingParams:
    """Cluster-level confounding effects: covariate effects and latent variance."""

    nu: tuple[float, ...]
    sigma2_alpha: float

    def __post_init__(self):
        nu = tuple(_finite_or_raise("nu", v) for v in np.atleast_1d(np.asarray(self.nu, dtype=float)))
        s2a = _finite_or_raise("sigma2_alpha", self.sigma2_alpha)
        if s2a < 0:
            raise ValidationError("sigma2_alpha must be nonnegative")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "sigma2_alpha", s2a)

    def varphi(self, family: Family) -> float:
        """Latent variance expressed in dispersion units."""
        return self.sigma2_alpha / family.dispersion

    @property
    def nu_array(self) -> np.ndarray:
        return np.asarray(self.nu, dtype=float)


class NullMoments(NamedTuple):
    mean: float
    variance: float


class ProviderArrays(NamedTuple):
    """Column-stacked view of a provider list, validated for a family."""

    ids: tuple[str, ...]
    observed: np.ndarray
    expected: np.ndarray
    effective_size: np.ndarray
    covariates: np.ndarray  # shape (I, P)
    n_patients: np.ndarray | None
    b3_sum: np.ndarray | None


def stack_providers(providers: Sequence[ProviderSummary], family: Family) -> ProviderArrays:
    """Validate a provider list against a family and stack it into arrays.

    Count families require nonnegative observed and positive expected
    totals; for continuous outcomes both are sums and may be negative.
    """
    if len(providers) == 0:
        raise ValidationError("empty provider list")
    count_family = family.kind in (POISSON, QUASI_POISSON)
    p_len = len(providers[0].covariates)
    for p in providers:
        if len(p.covariates) != p_len:
            raise ValidationError(
                f"provider {p.id!r} has {len(p.covariates)} covariates, expected {p_len}"
            )
        if count_family and (p.observed < 0 or p.expected <= 0):
            raise ValidationError(
                f"count outcomes need observed >= 0 and expected > 0 (provider {p.id!r})"
            )
        if family.kind == NORMAL and p.n_patients is None:
            raise ValidationError(f"normal family requires n_patients (provider {p.id!r})")
        if family.kind == EXP_FAMILY and p.b3_sum is None:
            raise ValidationError(f"exp-family approximation requires b3_sum (provider {p.id!r})")
    ids = tuple(p.id for p in providers)
    cov = np.array([p.covariates for p in providers], dtype=float).reshape(len(providers), p_len)
    n_pat = None
    if all(p.n_patients is not None for p in providers):
        n_pat = np.array([p.n_patients for p in providers], dtype=float)
    b3 = None
    if family.kind == POISSON or family.kind == QUASI_POISSON:
        b3 = np.array([p.effective_size for p in providers], dtype=float)
    elif all(p.b3_sum is not None for p in providers):
        b3 = np.array([p.b3_sum for p in providers], dtype=float)
    return ProviderArrays(
        ids=ids,
        observed=np.array([p.observed for p in providers], dtype=float),
        expected=np.array([p.expected for p in providers], dtype=float),
        effective_size=np.array([p.effective_size for p in providers], dtype=float),
        covariates=cov,
        n_patients=n_pat,
        b3_sum=b3,
    )


# ---------------------------------------------------------------------------
# Naive z-scores
# ---------------------------------------------------------------------------

def naive_z(provider: ProviderSummary, family: Family) -> float:
    """Score-test z statistic adjusted for patient mix only."""
    return float(
        (provider.observed - provider.expected)
        / math.sqrt(family.dispersion * provider.effective_size)
    )


def naive_z_many(arrays: ProviderArrays, family: Family) -> np.ndarray:
    return (arrays.observed - arrays.expected) / np.sqrt(
        family.dispersion * arrays.effective_size
    )


# ---------------------------------------------------------------------------
# Null moments
# ---------------------------------------------------------------------------

def _moments_arrays(
    lin: np.ndarray,
    effective_size: np.ndarray,
    family: Family,
    sigma2_alpha: float,
    n_patients: np.ndarray | None,
    b3_sum: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (mean, variance) of the null z-score distribution.

    ``lin`` is W'nu per provider.  Variance entries may be nonpositive for
    the generic approximation; callers decide whether to raise or retreat.
    """
    a = family.dispersion
    if family.kind == NORMAL:
        mean = np.sqrt(n_patients / a) * lin
        var = 1.0 + (sigma2_alpha / a) * n_patients
    elif family.kind in (POISSON, QUASI_POISSON):
        scale = effective_size / a
        g = np.exp(lin + 0.5 * sigma2_alpha)
        mean = np.sqrt(scale) * (g - 1.0)
        var = g * (1.0 + g * math.expm1(sigma2_alpha) * scale)
    else:  # EXP_FAMILY
        scale = effective_size / a
        mean = np.sqrt(scale) * lin
        var = 1.0 + (b3_sum / effective_size) * lin + (sigma2_alpha / a) * effective_size
    return mean, var


def null_moments(
    provider: ProviderSummary, family: Family, params: ConfoundingParams
) -> NullMoments:
    """Exact (normal/Poisson) or first-order (generic) null mean and variance.

    Raises :class:`DegenerateVarianceError` when the approximation yields a
    nonpositive variance; clamping would silently corrupt likelihoods.
    """
    arrays = stack_providers([provider], family)
    lin = arrays.covariates @ params.nu_array
    mean, var = _moments_arrays(
        lin, arrays.effective_size, family, params.sigma2_alpha,
        arrays.n_patients, arrays.b3_sum,
    )
    if not (var[0] > 0):
        raise DegenerateVarianceError(provider.id, float(var[0]))
    return NullMoments(float(mean[0]), float(var[0]))


def null_moments_many(
    arrays: ProviderArrays, family: Family, params: ConfoundingParams
) -> tuple[np.ndarray, np.ndarray]:
    """Batch moments; raises on the first degenerate variance."""
    lin = arrays.covariates @ params.nu_array
    mean, var = _moments_arrays(
        lin, arrays.effective_size, family, params.sigma2_alpha,
        arrays.n_patients, arrays.b3_sum,
    )
    bad = np.flatnonzero(~(var > 0))
    if bad.size:
        i = int(bad[0])
        raise DegenerateVarianceError(arrays.ids[i], float(var[i]))
    return mean, var


# ---------------------------------------------------------------------------
# Corrected z-scores
# ---------------------------------------------------------------------------

def corrected_z(
    provider: ProviderSummary, family: Family, params: ConfoundingParams
) -> float:
    """Z-score recentered and rescaled by the fitted null moments."""
    m = null_moments(provider, family, params)
    return float((naive_z(provider, family) - m.mean) / math.sqrt(m.variance))


def corrected_z_many(
    arrays: ProviderArrays, family: Family, params: ConfoundingParams
) -> np.ndarray:
    mean, var = null_moments_many(arrays, family, params)
    return (naive_z_many(arrays, family) - mean) / np.sqrt(var)
