"""Measure-ratio posteriors and outlier flagging.

The conventional report models the observed/expected ratio R with a
conjugate Gamma(O+2, E+2) posterior.  That posterior bakes the
cluster-level confounding into R.  The corrected version treats the
multiplicative confounding factor ``Lambda = exp(W'nu + alpha)`` as a
lognormal random variable (normal posterior uncertainty in ``nu`` plus
the latent variance), conditions the count model on it -- giving
Gamma(O+2, E*lambda+2) -- and integrates it out with Gauss-Hermite
quadrature in log-lambda.

Flag rules: a frequentist method compares a z-score to the two-sided
normal threshold; a credible-interval method flags when the equal-tailed
interval misses the reference ratio of one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.special import gammainc, gammaincinv, gammaln, ndtri

from .errors import BracketingError, ValidationError

ORIGINAL = "original"
CORRECTED = "corrected"

FREQ_NAIVE = "freq_naive"
FREQ_ADJUSTED = "freq_adjusted"
BAYES_NAIVE = "bayes_naive"
BAYES_ADJUSTED = "bayes_adjusted"
METHODS = (FREQ_NAIVE, FREQ_ADJUSTED, BAYES_NAIVE, BAYES_ADJUSTED)

FLAG_LOW = "low"
FLAG_NULL = "null"
FLAG_HIGH = "high"

# Conjugate prior on the measure ratio; the reporting convention for
# transplant-rate measures, configurable for other measure families.
DEFAULT_PRIOR_SHAPE = 2.0
DEFAULT_PRIOR_RATE = 2.0

DEFAULT_NODES = 64

_QUANTILE_RTOL = 1e-8
_STABILITY_TOL = 1e-4


@dataclass(frozen=True)
class NuPosterior:
    """Normal posterior for the covariate effects."""

    mean: np.ndarray
    covariance: np.ndarray
    prior_covariance: np.ndarray


@dataclass(frozen=True)
class LambdaPosterior:
    """Lognormal posterior of the multiplicative confounding factor."""

    log_mean: float
    log_variance: float

    def __post_init__(self):
        if not math.isfinite(self.log_mean):
            raise ValidationError("log_mean must be finite")
        if not (math.isfinite(self.log_variance) and self.log_variance >= 0):
            raise ValidationError("log_variance must be nonnegative")


def _check_square(name, m, p):
    m = np.asarray(m, dtype=float)
    if m.shape != (p, p):
        raise ValidationError(f"{name} must be {p}x{p}, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValidationError(f"{name} has non-finite entries")
    if not np.allclose(m, m.T, rtol=1e-8, atol=1e-12):
        raise ValidationError(f"{name} must be symmetric")
    return m


def nu_posterior(nu_hat, sigma_nu_hat, sigma_prior) -> NuPosterior:
    """Conjugate normal update of the covariate effects.

    Computed as ``m = S_prior (S_prior + S_hat)^-1 nu_hat`` and
    ``S_post = S_prior (S_prior + S_hat)^-1 S_hat``, which stays valid for
    a singular (even zero) prior.
    """
    nu_hat = np.atleast_1d(np.asarray(nu_hat, dtype=float))
    p = nu_hat.size
    prior = _check_square("sigma_prior", sigma_prior, p)
    hat = _check_square("sigma_nu_hat", sigma_nu_hat, p)
    total = prior + hat
    try:
        mean = prior @ np.linalg.solve(total, nu_hat)
        post = prior @ np.linalg.solve(total, hat)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"prior + estimate covariance is singular: {exc}") from exc
    return NuPosterior(mean=mean, covariance=(post + post.T) / 2.0, prior_covariance=prior)


def lambda_posterior(nu_post: NuPosterior, covariates, sigma2_alpha: float) -> LambdaPosterior:
    """Lognormal posterior of ``exp(W'nu + alpha)`` for one provider."""
    w = np.atleast_1d(np.asarray(covariates, dtype=float))
    if sigma2_alpha < 0:
        raise ValidationError("sigma2_alpha must be nonnegative")
    return LambdaPosterior(
        log_mean=float(w @ nu_post.mean),
        log_variance=float(w @ nu_post.covariance @ w) + float(sigma2_alpha),
    )


# ---------------------------------------------------------------------------
# Posterior of the measure ratio
# ---------------------------------------------------------------------------

def _gamma_logpdf(r, shape, rate):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(r) - rate * r


@dataclass(frozen=True)
class PosteriorR:
    """Posterior of the measure ratio: conjugate Gamma or corrected mixture.

    ``rate_base`` is the full Gamma rate for the original kind and the bare
    expected count for the corrected kind (the confounding factor folds
    into the rate inside the mixture).
    """

    kind: str
    shape: float
    rate_base: float
    lam: LambdaPosterior | None = None
    quadrature_nodes: int = DEFAULT_NODES
    prior_rate: float = DEFAULT_PRIOR_RATE
    converged: bool = True

    def __post_init__(self):
        if self.kind not in (ORIGINAL, CORRECTED):
            raise ValidationError(f"unknown posterior kind {self.kind!r}")
        if not self.shape > 0:
            raise ValidationError("shape must be positive")
        if self.kind == ORIGINAL:
            if not self.rate_base > 0:
                raise ValidationError("rate must be positive")
        else:
            if self.rate_base < 0:
                raise ValidationError("expected count must be nonnegative")
            if self.lam is None:
                raise ValidationError("corrected posterior requires a LambdaPosterior")
            if self.quadrature_nodes < 8:
                raise ValidationError("need at least 8 quadrature nodes")
            if not self.prior_rate > 0:
                raise ValidationError("prior rate must be positive")

    @cached_property
    def _mixture(self) -> tuple[np.ndarray, np.ndarray]:
        """(weights, component rates); a single unit-weight component when original."""
        if self.kind == ORIGINAL:
            return np.array([1.0]), np.array([self.rate_base])
        x, w = np.polynomial.hermite.hermgauss(self.quadrature_nodes)
        lam = np.exp(self.lam.log_mean + math.sqrt(2.0 * self.lam.log_variance) * x)
        return w / w.sum(), self.rate_base * lam + self.prior_rate

    def pdf(self, r):
        weights, rates = self._mixture
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        rr = np.atleast_1d(r)
        out = np.zeros_like(rr)
        pos = rr > 0
        if pos.any():
            logpdf = _gamma_logpdf(rr[pos][:, None], self.shape, rates[None, :])
            out[pos] = np.exp(logpdf) @ weights
        return float(out[0]) if scalar else out

    def cdf(self, r):
        weights, rates = self._mixture
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        rr = np.atleast_1d(r)
        out = np.zeros_like(rr)
        pos = rr > 0
        if pos.any():
            out[pos] = gammainc(self.shape, rr[pos][:, None] * rates[None, :]) @ weights
        return float(out[0]) if scalar else out

    def quantile(self, p: float) -> float:
        """Invert the CDF by bisection inside a component-quantile bracket."""
        if not 0.0 < p < 1.0:
            raise ValidationError(f"quantile order must be in (0, 1), got {p!r}")
        weights, rates = self._mixture
        # Components with a larger rate are stochastically smaller, so the
        # mixture quantile lies between the extreme component quantiles.
        v = float(gammaincinv(self.shape, p))
        lo = v / float(rates.max()) * (1.0 - 1e-12)
        hi = v / float(rates.min()) * (1.0 + 1e-12)
        flo, fhi = self.cdf(lo) - p, self.cdf(hi) - p
        for _ in range(8):
            if flo <= 0.0:
                break
            lo *= 0.5
            flo = self.cdf(lo) - p
        for _ in range(8):
            if fhi >= 0.0:
                break
            hi *= 2.0
            fhi = self.cdf(hi) - p
        if flo > 0.0 or fhi < 0.0:
            raise BracketingError(
                f"could not bracket p={p!r} in [{lo!r}, {hi!r}] (cdf offsets {flo!r}, {fhi!r})"
            )
        while hi - lo > _QUANTILE_RTOL * max(1e-300, abs(hi)):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def mean(self) -> float:
        weights, rates = self._mixture
        return float(np.sum(weights * self.shape / rates))

    def median(self) -> float:
        return self.quantile(0.5)


def original_posterior(
    observed: float,
    expected: float,
    prior_shape: float = DEFAULT_PRIOR_SHAPE,
    prior_rate: float = DEFAULT_PRIOR_RATE,
) -> PosteriorR:
    """Conjugate Gamma posterior of the uncorrected measure ratio."""
    if observed < 0:
        raise ValidationError("observed count must be nonnegative")
    if expected < 0:
        raise ValidationError("expected count must be nonnegative")
    return PosteriorR(ORIGINAL, observed + prior_shape, expected + prior_rate)


def corrected_posterior(
    observed: float,
    expected: float,
    lam: LambdaPosterior,
    nodes: int = DEFAULT_NODES,
    prior_shape: float = DEFAULT_PRIOR_SHAPE,
    prior_rate: float = DEFAULT_PRIOR_RATE,
    check_stability: bool = True,
) -> PosteriorR:
    """Gamma-lognormal mixture posterior of the corrected measure ratio.

    When ``check_stability`` is set, the median is recomputed with twice
    the nodes; a shift above 1e-4 downgrades the result to a warning
    status rather than failing.
    """
    if observed < 0:
        raise ValidationError("observed count must be nonnegative")
    if expected < 0:
        raise ValidationError("expected count must be nonnegative")
    post = PosteriorR(CORRECTED, observed + prior_shape, expected, lam, nodes, prior_rate)
    if check_stability:
        finer = PosteriorR(CORRECTED, observed + prior_shape, expected, lam, 2 * nodes, prior_rate)
        if abs(post.median() - finer.median()) > _STABILITY_TOL:
            warnings.warn(
                f"quadrature not settled at {nodes} nodes for this posterior",
                RuntimeWarning,
            )
            post = replace(post, converged=False)
    return post


# ---------------------------------------------------------------------------
# Flag decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlagDecision:
    provider_id: str
    method: str
    statistic: float
    interval: tuple[float, float] | None
    flag: str


def flag(
    provider_id: str,
    method: str,
    *,
    z: float | None = None,
    posterior: PosteriorR | None = None,
    level: float = 0.05,
) -> FlagDecision:
    """Classify one provider as low/null/high at the given two-sided level."""
    if method not in METHODS:
        raise ValidationError(f"unknown flagging method {method!r}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level!r}")
    if method in (FREQ_NAIVE, FREQ_ADJUSTED):
        if z is None:
            raise ValidationError("frequentist methods need a z statistic")
        threshold = float(ndtri(1.0 - level / 2.0))
        if z < -threshold:
            decision = FLAG_LOW
        elif z > threshold:
            decision = FLAG_HIGH
        else:
            decision = FLAG_NULL
        return FlagDecision(provider_id, method, float(z), None, decision)
    if posterior is None:
        raise ValidationError("credible-interval methods need a posterior")
    lo = posterior.quantile(level / 2.0)
    hi = posterior.quantile(1.0 - level / 2.0)
    if hi < 1.0:
        decision = FLAG_LOW
    elif lo > 1.0:
        decision = FLAG_HIGH
    else:
        decision = FLAG_NULL
    return FlagDecision(provider_id, method, posterior.median(), (lo, hi), decision)
