"""Robust starting values via Huber M-estimation.

The fitting algorithm needs initial values for the confounding effects,
the residual scale, and the latent variance.  These come from a robust
linear regression of the naive z-scores on the scaled covariates
``sqrt(effective_size / dispersion) * W``, solved by iteratively
reweighted least squares with a concurrent MAD scale update, followed by
a method-of-moments back-out of the latent variance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import SingularDesignError, ValidationError
from .summaries import Family, ProviderSummary, naive_z_many, stack_providers

# Phi^{-1}(3/4): makes the MAD a consistent scale estimate under normality.
MAD_TO_SIGMA = 0.6744897501960817

# 95%-efficiency tuning constant for the Huber psi-function.
DEFAULT_TUNING = 1.345

SCALE_FLOOR = 1e-8


class HuberResult(NamedTuple):
    coefficients: np.ndarray
    scale: float
    converged: bool
    n_iter: int


@dataclass(frozen=True)
class InitEstimate:
    """Starting values: covariate effects, residual scale, latent variance."""

    nu0: tuple[float, ...]
    scale0: float
    sigma2_alpha0: float

    def __post_init__(self):
        if not self.scale0 > 0:
            raise ValidationError("scale0 must be positive")
        if self.sigma2_alpha0 < 0:
            raise ValidationError("sigma2_alpha0 must be nonnegative")

    @property
    def nu0_array(self) -> np.ndarray:
        return np.asarray(self.nu0, dtype=float)


def _mad_scale(residuals: np.ndarray) -> float:
    r = residuals - np.median(residuals)
    return max(float(np.median(np.abs(r))) / MAD_TO_SIGMA, SCALE_FLOOR)


def huber_regression(
    responses,
    design,
    tuning: float = DEFAULT_TUNING,
    *,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> HuberResult:
    """Huber M-estimate of a linear model by IRLS.

    The scale is re-estimated each iteration from the MAD of the current
    residuals (floored at ``SCALE_FLOOR`` so interpolating fits do not
    degenerate).  Convergence is declared when the largest coefficient
    change drops below ``tol``; otherwise a warning is issued and the last
    iterate is returned.
    """
    y = np.asarray(responses, dtype=float)
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if y.shape != (n,):
        raise ValidationError(f"responses shape {y.shape} does not match design {x.shape}")
    if not (np.isfinite(y).all() and np.isfinite(x).all()):
        raise ValidationError("non-finite values in regression inputs")
    if n <= p:
        raise ValidationError(f"need more observations ({n}) than parameters ({p})")
    if p and np.linalg.matrix_rank(x) < p:
        raise SingularDesignError(f"design matrix is rank-deficient (rank < {p})")
    if tuning <= 0:
        raise ValidationError("tuning must be positive")
    if p == 0:  # nothing to fit; the responses are the residuals
        return HuberResult(np.empty(0), _mad_scale(y), True, 0)

    beta = np.linalg.lstsq(x, y, rcond=None)[0]
    scale = _mad_scale(y - x @ beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resid = y - x @ beta
        scale = _mad_scale(resid)
        cut = tuning * scale
        absr = np.abs(resid)
        w = np.where(absr <= cut, 1.0, cut / np.maximum(absr, SCALE_FLOOR))
        sw = np.sqrt(w)
        beta_new = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)[0]
        step = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        if step < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"Huber IRLS did not converge in {max_iter} iterations; returning last iterate",
            RuntimeWarning,
        )
    scale = _mad_scale(y - x @ beta)
    return HuberResult(beta, scale, converged, it)


def initialize(
    providers: Sequence[ProviderSummary],
    family: Family,
    tuning: float = DEFAULT_TUNING,
) -> InitEstimate:
    """Robust starting values for the empirical-null fit.

    Regresses the naive z-scores on ``sqrt(effective_size/dispersion) * W``
    (no extra intercept: the null mean passes through the origin), then
    backs out the latent variance from the robust residual scale:

        sigma2_alpha0 = max(0, (scale^2 - 1 - median(W'nu0)) / median(effective_size))
    """
    arrays = stack_providers(providers, family)
    n, p = arrays.covariates.shape
    if n < p + 2:
        raise ValidationError(f"need at least {p + 2} providers, got {n}")
    z = naive_z_many(arrays, family)
    design = np.sqrt(arrays.effective_size / family.dispersion)[:, None] * arrays.covariates
    fit = huber_regression(z, design, tuning)
    nu0 = fit.coefficients
    lin = arrays.covariates @ nu0
    s2a0 = (fit.scale**2 - 1.0 - float(np.median(lin))) / float(
        np.median(arrays.effective_size)
    )
    return InitEstimate(tuple(nu0), fit.scale, max(0.0, s2a0))
