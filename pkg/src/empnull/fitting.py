"""Empirical-null model fitting.

Average-quality providers have z-scores inside a per-provider interval
``[A_i, B_i]``; outliers fall outside it.  The fitting algorithm:

1. robust starting values (``empnull.robust.initialize``),
2. intervals ``A_i, B_i = mean_i -+ multiplier * sd_i`` at the starting
   values, held fixed afterwards,
3. a grid of candidate null proportions ``pi0``,
4. for each ``pi0``, Nelder-Mead maximization over
   ``(nu, log sigma2_alpha)`` of

       sum_{i in S0} log(pi0 * phi_i(z_i))
         + sum_{i not in S0} log(1 - pi0 * Q_i),

   where ``S0`` is the set of providers with z inside their interval,
   ``phi_i`` is the normal density with the family's null moments, and
   ``Q_i`` is the null probability mass inside ``[A_i, B_i]``,
5. the grid point with the best maximized log-likelihood wins (ties go to
   the larger, more conservative ``pi0``).

A heteroskedasticity-consistent sandwich covariance over the null-set
rows of the scaled design gives standard errors for the covariate
effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    DegenerateWeightError,
    FitFailureError,
    InvalidStartError,
    NoNullProvidersError,
    SingularDesignError,
    ValidationError,
)
from .robust import DEFAULT_TUNING, InitEstimate, initialize
from .summaries import (
    EXP_FAMILY,
    NORMAL,
    POISSON,
    QUASI_POISSON,
    ConfoundingParams,
    Family,
    ProviderArrays,
    ProviderSummary,
    naive_z_many,
    null_moments_many,
    stack_providers,
)

_LOG_2PI = math.log(2.0 * math.pi)

# Starting floor for the log-variance coordinate; the optimizer may walk
# below it freely, it only keeps log(0) out of the start vector.
_START_SIGMA2_FLOOR = 1e-6

# Width (in null sds) of the residual window used for the covariance
# misspecification check; wide enough that interval clipping is immaterial.
_MOMENT_CHECK_WIDTH = 3.5


@dataclass(frozen=True)
class NullInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValidationError(
                f"interval lower bound {self.lower!r} must be below upper {self.upper!r}"
            )


@dataclass(frozen=True)
class FitConfig:
    """Knobs for :func:`fit`.  Defaults follow the estimation algorithm."""

    pi0_grid: tuple[float, ...] = tuple(np.linspace(0.02, 1.0, 50))
    interval_multiplier: float = 1.96
    # Contaminated datasets inflate the initial residual scale, which widens
    # the first-pass intervals enough to let mild outliers into the null set;
    # two refinement passes from the fitted parameters restore the intervals.
    refit_intervals: int = 2
    baseline: bool = False  # classical normal-MLE comparator: pi0=1, everyone null
    nm_f_tol: float = 1e-10
    nm_max_iter: int = 2000
    huber_tuning: float = DEFAULT_TUNING
    compute_covariance: bool = True

    def __post_init__(self):
        grid = tuple(float(p) for p in self.pi0_grid)
        if not grid or any(not (0.0 < p <= 1.0) for p in grid):
            raise ValidationError("pi0 grid values must lie in (0, 1]")
        if any(b < a for a, b in zip(grid, grid[1:])):
            raise ValidationError("pi0 grid must be nondecreasing")
        object.__setattr__(self, "pi0_grid", grid)
        if self.interval_multiplier <= 0:
            raise ValidationError("interval multiplier must be positive")
        if self.refit_intervals < 0:
            raise ValidationError("refit_intervals must be nonnegative")


@dataclass(frozen=True)
class EnFit:
    """Fitted empirical-null model."""

    params: ConfoundingParams
    pi0: float
    loglik: float
    null_set: np.ndarray  # bool, length I
    intervals: tuple[NullInterval, ...]
    covariance: np.ndarray | None
    converged: bool
    init: InitEstimate
    warnings: tuple[str, ...] = ()
    pi0_grid: tuple[float, ...] = ()
    grid_loglik: tuple[float, ...] = ()

    @property
    def n_null(self) -> int:
        return int(np.count_nonzero(self.null_set))


# ---------------------------------------------------------------------------
# Null intervals
# ---------------------------------------------------------------------------

def _as_params(estimate) -> ConfoundingParams:
    if isinstance(estimate, ConfoundingParams):
        return estimate
    if isinstance(estimate, InitEstimate):
        return ConfoundingParams(estimate.nu0, estimate.sigma2_alpha0)
    raise ValidationError(f"expected InitEstimate or ConfoundingParams, got {type(estimate)!r}")


def null_intervals(
    providers: Sequence[ProviderSummary] | ProviderArrays,
    family: Family,
    estimate,
    multiplier: float = 1.96,
) -> tuple[NullInterval, ...]:
    """Per-provider null band: moments at ``estimate`` widened by ``multiplier`` sds."""
    arrays = providers if isinstance(providers, ProviderArrays) else stack_providers(providers, family)
    params = _as_params(estimate)
    mean, var = null_moments_many(arrays, family, params)
    half = multiplier * np.sqrt(var)
    return tuple(NullInterval(float(m - h), float(m + h)) for m, h in zip(mean, half))


# ---------------------------------------------------------------------------
# Log-likelihood
# ---------------------------------------------------------------------------

def _norm_interval_prob(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    """P(za < N(0,1) < zb), stable when both endpoints share a sign."""
    upper_side = za >= 0.0
    return np.where(upper_side, ndtr(-za) - ndtr(-zb), ndtr(zb) - ndtr(za))


def _lin_fn(cov: np.ndarray):
    """W'nu evaluator; scalar fast path for a single covariate."""
    if cov.shape[1] == 1:
        flat = np.ascontiguousarray(cov[:, 0])
        return lambda nu: flat * nu[0]
    return lambda nu: cov @ nu


def _make_loglik(
    arrays: ProviderArrays,
    family: Family,
    z: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    null_set: np.ndarray,
):
    """Build ``loglik(nu, sigma2_alpha, pi0)`` with all constants bound.

    Returns -inf instead of raising when a point is invalid (nonpositive
    variance under the generic approximation, overflowing rates, or a
    truncation term hitting zero) so the optimizer can retreat.

    Splits and family constants are precomputed: the hot loop of the fit
    calls this thousands of times on 2-3 parameters.
    """
    inm = np.asarray(null_set, dtype=bool)
    outm = ~inm
    n_in = int(np.count_nonzero(inm))
    n_out = int(np.count_nonzero(outm))
    a = family.dispersion
    z_in = z[inm]
    lo_out, hi_out = lo[outm], hi[outm]
    lin_in = _lin_fn(arrays.covariates[inm])
    lin_out = _lin_fn(arrays.covariates[outm])
    base_in = -0.5 * n_in * _LOG_2PI
    kind = family.kind

    if kind in (POISSON, QUASI_POISSON):
        scale_in = arrays.effective_size[inm] / a
        sqrt_scale_in = np.sqrt(scale_in)
        k_in = z_in / sqrt_scale_in + 1.0  # z = sqrt(scale)*(k-1) recenters in g-space
        scale_out = arrays.effective_size[outm] / a
        sqrt_scale_out = np.sqrt(scale_out)

        def loglik(nu, sigma2_alpha, pi0):
            if not 0.0 <= sigma2_alpha < 300.0:
                return -math.inf
            half = 0.5 * sigma2_alpha
            c = math.expm1(sigma2_alpha)
            total = base_in + n_in * math.log(pi0)
            if n_in:
                m = lin_in(nu) + half
                if m.max() > 150.0:  # far beyond any plausible rate; exp would overflow
                    return -math.inf
                g = np.exp(m)
                var = g * (1.0 + g * (c * scale_in))
                q = k_in - g
                total -= 0.5 * (
                    float(np.log(var).sum()) + float((scale_in * (q * q) / var).sum())
                )
            if n_out:
                m = lin_out(nu) + half
                if m.max() > 150.0:
                    return -math.inf
                g = np.exp(m)
                var = g * (1.0 + g * (c * scale_out))
                mean = sqrt_scale_out * (g - 1.0)
                sd = np.sqrt(var)
                tail = pi0 * _norm_interval_prob((lo_out - mean) / sd, (hi_out - mean) / sd)
                if tail.max() >= 1.0:
                    return -math.inf
                total += float(np.log1p(-tail).sum())
            return total if total == total else -math.inf

    elif kind == NORMAL:
        ratio_in = arrays.n_patients[inm] / a
        sqrt_ratio_in = np.sqrt(ratio_in)
        ratio_out = arrays.n_patients[outm] / a
        sqrt_ratio_out = np.sqrt(ratio_out)
        # constant caseload sizes give a common variance; keep it scalar
        ratio_const = float(ratio_in[0]) if n_in and np.ptp(ratio_in) == 0.0 else None

        def loglik(nu, sigma2_alpha, pi0):
            if not 0.0 <= sigma2_alpha < 1e12:
                return -math.inf
            total = base_in + n_in * math.log(pi0)
            if n_in:
                resid = z_in - sqrt_ratio_in * lin_in(nu)
                if ratio_const is not None:
                    v = 1.0 + sigma2_alpha * ratio_const
                    total -= 0.5 * (n_in * math.log(v) + float((resid * resid).sum()) / v)
                else:
                    var = 1.0 + sigma2_alpha * ratio_in
                    total -= 0.5 * (
                        float(np.log(var).sum()) + float((resid * resid / var).sum())
                    )
            if n_out:
                mean = sqrt_ratio_out * lin_out(nu)
                sd = np.sqrt(1.0 + sigma2_alpha * ratio_out)
                tail = pi0 * _norm_interval_prob((lo_out - mean) / sd, (hi_out - mean) / sd)
                if tail.max() >= 1.0:
                    return -math.inf
                total += float(np.log1p(-tail).sum())
            return total if total == total else -math.inf

    else:  # EXP_FAMILY: the first-order variance can go nonpositive
        scale_in = arrays.effective_size[inm] / a
        sqrt_scale_in = np.sqrt(scale_in)
        b3r_in = arrays.b3_sum[inm] / arrays.effective_size[inm]
        scale_out = arrays.effective_size[outm] / a
        sqrt_scale_out = np.sqrt(scale_out)
        b3r_out = arrays.b3_sum[outm] / arrays.effective_size[outm]

        def loglik(nu, sigma2_alpha, pi0):
            if not 0.0 <= sigma2_alpha < 1e12:
                return -math.inf
            total = base_in + n_in * math.log(pi0)
            if n_in:
                lin = lin_in(nu)
                var = 1.0 + b3r_in * lin + sigma2_alpha * scale_in
                if not np.all(var > 0.0):
                    return -math.inf
                resid = z_in - sqrt_scale_in * lin
                total -= 0.5 * (
                    float(np.log(var).sum()) + float((resid * resid / var).sum())
                )
            if n_out:
                lin = lin_out(nu)
                var = 1.0 + b3r_out * lin + sigma2_alpha * scale_out
                if not np.all(var > 0.0):
                    return -math.inf
                mean = sqrt_scale_out * lin
                sd = np.sqrt(var)
                tail = pi0 * _norm_interval_prob((lo_out - mean) / sd, (hi_out - mean) / sd)
                if tail.max() >= 1.0:
                    return -math.inf
                total += float(np.log1p(-tail).sum())
            return total if total == total else -math.inf

    return loglik


def log_likelihood(
    providers: Sequence[ProviderSummary] | ProviderArrays,
    family: Family,
    params: ConfoundingParams,
    pi0: float,
    intervals: Sequence[NullInterval],
    null_set,
) -> float:
    """Evaluate the empirical-null log-likelihood at fixed intervals/membership.

    Callers are responsible for membership being consistent with the
    intervals (the baseline comparator deliberately forces everyone in).
    """
    if not 0.0 < pi0 <= 1.0:
        raise ValidationError(f"pi0 must be in (0, 1], got {pi0!r}")
    arrays = providers if isinstance(providers, ProviderArrays) else stack_providers(providers, family)
    if len(intervals) != len(arrays.ids):
        raise ValidationError("one interval per provider required")
    z = naive_z_many(arrays, family)
    lo = np.array([iv.lower for iv in intervals])
    hi = np.array([iv.upper for iv in intervals])
    mask = np.asarray(null_set, dtype=bool)
    evaluator = _make_loglik(arrays, family, z, lo, hi, mask)
    return evaluator(params.nu_array, params.sigma2_alpha, float(pi0))


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------

class NMResult(NamedTuple):
    x: np.ndarray
    value: float
    converged: bool
    n_iter: int
    n_evals: int


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    start,
    *,
    f_tol: float = 1e-10,
    x_tol: float = 1e-5,
    max_iter: int = 2000,
    initial_step=None,
) -> NMResult:
    """Maximize ``objective`` with the simplex method.

    Coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
    Stops when the simplex function-value spread drops below ``f_tol`` and
    its diameter below ``x_tol`` (vertices can straddle a symmetric optimum
    with equal values, so the value spread alone is not enough), or after
    ``max_iter`` iterations.  The start vertex is never abandoned for
    anything worse, so the result is always >= the starting value.
    """
    x0 = np.atleast_1d(np.asarray(start, dtype=float))
    if x0.ndim != 1 or not np.isfinite(x0).all():
        raise ValidationError("start must be a finite vector")
    n = x0.size
    evals = 0

    def g(x):  # minimize the negated objective
        nonlocal evals
        evals += 1
        v = objective(x)
        return math.inf if v == -math.inf or math.isnan(v) else -v

    g0 = g(x0)
    if not math.isfinite(g0):
        raise InvalidStartError("objective is -inf at the starting point")

    if initial_step is None:
        steps = np.where(x0 != 0.0, 0.05 * np.abs(x0), 0.1)
    else:
        steps = np.broadcast_to(np.asarray(initial_step, dtype=float), (n,)).copy()
    simplex = np.empty((n + 1, n))
    fvals = np.empty(n + 1)
    simplex[0] = x0
    fvals[0] = g0
    for i in range(n):
        v = x0.copy()
        v[i] += steps[i]
        simplex[i + 1] = v
        fvals[i + 1] = g(v)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]
        spread = fvals[-1] - fvals[0]
        if spread < f_tol and np.max(np.abs(simplex[1:] - simplex[0])) < x_tol:
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + (centroid - simplex[-1])
        fr = g(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - simplex[-1])
            fe = g(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:  # outside contraction
                xc = centroid + 0.5 * (xr - centroid)
                fc = g(xc)
                if fc <= fr:
                    simplex[-1], fvals[-1] = xc, fc
                else:
                    fvals, simplex = _shrink(g, simplex, fvals)
            else:  # inside contraction
                xc = centroid + 0.5 * (simplex[-1] - centroid)
                fc = g(xc)
                if fc < fvals[-1]:
                    simplex[-1], fvals[-1] = xc, fc
                else:
                    fvals, simplex = _shrink(g, simplex, fvals)

    best = int(np.argmin(fvals))
    return NMResult(simplex[best].copy(), -float(fvals[best]), converged, it, evals)


def _shrink(g, simplex, fvals):
    for i in range(1, simplex.shape[0]):
        simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
        fvals[i] = g(simplex[i])
    return fvals, simplex


# ---------------------------------------------------------------------------
# Full fit
# ---------------------------------------------------------------------------

def fit(
    providers: Sequence[ProviderSummary],
    family: Family,
    config: FitConfig | None = None,
) -> EnFit:
    """Estimate the confounding parameters and the null proportion.

    With ``config.baseline`` the model collapses to the classical normal
    MLE (``pi0`` forced to one, every provider treated as null), which is
    the natural non-robust comparator.
    """
    cfg = config or FitConfig()
    arrays = stack_providers(providers, family)
    n, p = arrays.covariates.shape
    if n < p + 2:
        raise ValidationError(f"need at least {p + 2} providers, got {n}")

    init = initialize(providers, family, cfg.huber_tuning)
    params = ConfoundingParams(init.nu0, init.sigma2_alpha0)
    z = naive_z_many(arrays, family)

    notes: list[str] = []
    result = None
    # The baseline ignores the intervals, so refinement passes would be no-ops.
    n_rounds = 1 if cfg.baseline else cfg.refit_intervals + 1
    for _ in range(n_rounds):
        # each pass restarts the optimizer from the previous fit
        start = np.append(
            params.nu_array, math.log(max(params.sigma2_alpha, _START_SIGMA2_FLOOR))
        )
        intervals = null_intervals(arrays, family, params, cfg.interval_multiplier)
        lo = np.array([iv.lower for iv in intervals])
        hi = np.array([iv.upper for iv in intervals])
        if cfg.baseline:
            null_set = np.ones(n, dtype=bool)
            grid = (1.0,)
        else:
            null_set = (z >= lo) & (z <= hi)
            grid = cfg.pi0_grid
        if not null_set.any():
            raise NoNullProvidersError(
                "no z-score fell inside its null interval; the model is unidentifiable"
            )
        evaluator = _make_loglik(arrays, family, z, lo, hi, null_set)

        def make_objective(pi0):
            def objective(x):
                t = x[p]
                s2a = math.exp(t) if t < 690.0 else math.inf
                return evaluator(x[:p], s2a, pi0)
            return objective

        best_pi0 = None
        best_nm = None
        grid_ll = []
        diagnostics = []
        for pi0 in grid:
            obj = make_objective(pi0)
            try:
                nm = nelder_mead(obj, start, f_tol=cfg.nm_f_tol, max_iter=cfg.nm_max_iter)
            except InvalidStartError as exc:
                diagnostics.append(f"pi0={pi0:g}: {exc}")
                grid_ll.append(-math.inf)
                continue
            grid_ll.append(nm.value)
            # ascending grid + ">=" breaks exact ties toward the larger pi0
            if best_nm is None or nm.value >= best_nm.value:
                best_pi0, best_nm = pi0, nm
        if best_nm is None:
            raise FitFailureError("every pi0 grid point failed", diagnostics)
        if diagnostics:
            notes.extend(diagnostics)
        if not best_nm.converged:
            notes.append(f"optimizer hit the iteration cap at pi0={best_pi0:g}")
        params = ConfoundingParams(tuple(best_nm.x[:p]), math.exp(best_nm.x[p]))
        result = (params, best_pi0, best_nm, null_set, intervals, tuple(grid), tuple(grid_ll))

    params, pi0, nm, null_set, intervals, grid, grid_ll = result
    if not cfg.baseline:
        params = _recalibrate_latent_variance(arrays, family, params, pi0, z)
    covariance = None
    if cfg.compute_covariance:
        lo = np.array([iv.lower for iv in intervals])
        hi = np.array([iv.upper for iv in intervals])
        evaluator = _make_loglik(arrays, family, z, lo, hi, null_set)
        covariance = _effect_covariance(
            arrays, family, params, pi0, lo, hi, z, null_set, evaluator
        )
        if covariance is None:
            notes.append("observed information not positive definite; using the linear-model sandwich")
            try:
                covariance = sandwich_covariance(arrays, family, params, null_set)
            except (SingularDesignError, DegenerateWeightError) as exc:
                covariance = None
                notes.append(f"covariance unavailable: {exc}")
    return EnFit(
        params=params,
        pi0=float(pi0),
        loglik=float(nm.value),
        null_set=null_set,
        intervals=intervals,
        covariance=covariance,
        converged=nm.converged,
        init=init,
        warnings=tuple(notes),
        pi0_grid=grid,
        grid_loglik=grid_ll,
    )


def _wide_window_factor(u: np.ndarray, pi0: float) -> float:
    """Realized-over-model second moment of the standardized residuals.

    Measured on a window wide enough that interval clipping is immaterial,
    and weighted by the null share.  Under the working model this is one;
    skewed count scores pull it above one because the clipped normal MLE
    absorbs part of their spread.
    """
    w = _MOMENT_CHECK_WIDTH
    kappa_w = math.erf(w / math.sqrt(2.0)) - 2.0 * w * math.exp(-0.5 * w * w) / math.sqrt(
        2.0 * math.pi
    )
    inside = np.abs(u) <= w
    return float(np.sum(u[inside] ** 2)) / (pi0 * kappa_w * u.size)


def _recalibrate_latent_variance(
    arrays: ProviderArrays,
    family: Family,
    params: ConfoundingParams,
    pi0: float,
    z: np.ndarray,
) -> ConfoundingParams:
    """Moment recalibration of the latent variance after the likelihood fit.

    Fitting a normal working model to interval-clipped z-scores understates
    the null variance when the true score distribution is skewed (counts
    mixed over a latent effect are), which miscalibrates corrected z-scores
    and credible widths downstream.  This solves for the latent variance
    whose model-implied dispersion matches the realized wide-window second
    moment, iterating because the window itself is measured in model sd
    units.  For genuinely normal scores the factor is ~1 and the estimate
    is left essentially unchanged.
    """

    def implied(s2a: float) -> float:
        _, v = null_moments_many(arrays, family, ConfoundingParams(params.nu, s2a))
        return float(v.mean())

    current = params
    for _ in range(8):
        mean0, var0 = null_moments_many(arrays, family, current)
        u = (z - mean0) / np.sqrt(var0)
        factor = _wide_window_factor(u, pi0)
        if not (math.isfinite(factor) and factor > 0.0):
            return current
        if abs(factor - 1.0) < 1e-4:
            break
        target = factor * float(var0.mean())
        if target <= implied(0.0):
            current = ConfoundingParams(current.nu, 0.0)
            break
        hi = max(current.sigma2_alpha, 1e-4)
        for _ in range(200):
            if implied(hi) >= target:
                break
            hi *= 2.0
        lo = 0.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if implied(mid) < target:
                lo = mid
            else:
                hi = mid
        current = ConfoundingParams(current.nu, 0.5 * (lo + hi))
    return current


# ---------------------------------------------------------------------------
# Covariance of the effect estimates
# ---------------------------------------------------------------------------

def _moment_gradients(arrays, family, params, with_s2a):
    """Central-difference gradients of the per-provider null (mean, var)
    with respect to (nu[, sigma2_alpha]).  Shapes (dim, I)."""
    nu = params.nu_array
    p = nu.size
    dim = p + 1 if with_s2a else p
    n = len(arrays.ids)
    m_t = np.empty((dim, n))
    v_t = np.empty((dim, n))
    for d in range(p):
        h = 1e-5 * max(1.0, abs(nu[d]))
        up = nu.copy(); up[d] += h
        dn = nu.copy(); dn[d] -= h
        m_hi, v_hi = null_moments_many(arrays, family, ConfoundingParams(tuple(up), params.sigma2_alpha))
        m_lo, v_lo = null_moments_many(arrays, family, ConfoundingParams(tuple(dn), params.sigma2_alpha))
        m_t[d] = (m_hi - m_lo) / (2.0 * h)
        v_t[d] = (v_hi - v_lo) / (2.0 * h)
    if with_s2a:
        s2a = params.sigma2_alpha
        h = min(1e-5 * max(s2a, 1e-3), s2a / 2.0)
        m_hi, v_hi = null_moments_many(arrays, family, ConfoundingParams(tuple(nu), s2a + h))
        m_lo, v_lo = null_moments_many(arrays, family, ConfoundingParams(tuple(nu), s2a - h))
        m_t[p] = (m_hi - m_lo) / (2.0 * h)
        v_t[p] = (v_hi - v_lo) / (2.0 * h)
    return m_t, v_t


def _observed_hessian(evaluator, params: ConfoundingParams, pi0: float, with_s2a: bool):
    """Central-difference negative Hessian of the log-likelihood in
    (nu[, sigma2_alpha]).  None when any stencil point is invalid."""
    nu = params.nu_array
    p = nu.size
    dim = p + 1 if with_s2a else p
    s2a = params.sigma2_alpha
    theta0 = np.append(nu, s2a) if with_s2a else nu.copy()
    steps = np.full(dim, 1e-4)
    for d in range(p):
        steps[d] = 1e-4 * max(1.0, abs(nu[d]))
    if with_s2a:
        steps[p] = min(1e-4 * max(s2a, 1e-3), s2a / 2.0)

    def value(theta):
        s = theta[p] if with_s2a else s2a
        return evaluator(theta[:p], s, pi0)

    f0 = value(theta0)
    if not math.isfinite(f0):
        return None
    hess = np.empty((dim, dim))
    for i in range(dim):
        ei = np.zeros(dim)
        ei[i] = steps[i]
        hess[i, i] = (value(theta0 + ei) - 2.0 * f0 + value(theta0 - ei)) / steps[i] ** 2
        for j in range(i + 1, dim):
            ej = np.zeros(dim)
            ej[j] = steps[j]
            hess[i, j] = hess[j, i] = (
                value(theta0 + ei + ej)
                - value(theta0 + ei - ej)
                - value(theta0 - ei + ej)
                + value(theta0 - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
    if not np.isfinite(hess).all():
        return None
    return -(hess + hess.T) / 2.0


def _effect_covariance(
    arrays: ProviderArrays,
    family: Family,
    params: ConfoundingParams,
    pi0: float,
    lo: np.ndarray,
    hi: np.ndarray,
    z: np.ndarray,
    null_set: np.ndarray,
    evaluator,
) -> np.ndarray | None:
    """Sandwich covariance of the censored-model estimating equations.

    Bread: observed negative Hessian of the log-likelihood (a plain
    heteroskedastic sandwich over the linearized model ignores the interval
    censoring and understates the sampling variance).  Meat: empirical
    outer product of the per-provider scores, which keeps the estimate
    honest when the z-scores are heavier-tailed than the normal working
    model (counts mixed over a latent effect are).  Scores are analytic in
    the standardized residual; (mean, var) gradients come from central
    differences.  Returns None when the bread is not positive definite.
    """
    nu = params.nu_array
    p = nu.size
    with_s2a = params.sigma2_alpha > 1e-8
    bread = _observed_hessian(evaluator, params, pi0, with_s2a)
    if bread is None:
        return None
    try:
        np.linalg.cholesky(bread)
    except np.linalg.LinAlgError:
        return None
    bread_inv = np.linalg.inv(bread)

    mean0, var0 = null_moments_many(arrays, family, params)
    sd0 = np.sqrt(var0)
    m_t, v_t = _moment_gradients(arrays, family, params, with_s2a)
    a = (lo - mean0) / sd0
    b = (hi - mean0) / sd0
    phi_a = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    phi_b = np.exp(-0.5 * b * b) / math.sqrt(2.0 * math.pi)
    q = _norm_interval_prob(a, b)
    denom = np.maximum(1.0 - pi0 * q, 1e-12)
    # score of log phi in the standardized residual u: pu * u + qu * (u^2 - 1)
    pu = m_t / sd0
    qu = v_t / (2.0 * var0)
    sd_t = v_t / (2.0 * sd0)
    q_t = phi_b * (-(m_t + b * sd_t) / sd0) - phi_a * (-(m_t + a * sd_t) / sd0)
    mask = np.asarray(null_set, dtype=bool)
    u = (z - mean0) / sd0
    scores = np.where(mask, pu * u + qu * (u * u - 1.0), -pi0 * q_t / denom)
    meat = scores @ scores.T
    cov = (bread_inv @ meat @ bread_inv)[:p, :p]

    # Residual second-moment factor: guards the width against any part of
    # the score dispersion the clipped working model failed to absorb.
    factor = _wide_window_factor(u, pi0)
    if math.isfinite(factor) and factor > 0.0:
        cov = cov * factor
    return (cov + cov.T) / 2.0


# ---------------------------------------------------------------------------
# Linear-model sandwich (heteroskedasticity-consistent, truncation-blind)
# ---------------------------------------------------------------------------

def _linearized_variance(arrays: ProviderArrays, family: Family, params: ConfoundingParams) -> np.ndarray:
    """First-order error variance of z under the null, per provider.

    This is the heteroskedastic weight of the linearized model: for
    Poisson-type outcomes ``1 + W'nu + varphi * neff`` (second and third
    cumulant derivatives coincide), for normal outcomes ``1 + varphi * n``.
    """
    varphi = params.varphi(family)
    if family.kind == NORMAL:
        return 1.0 + varphi * arrays.n_patients
    lin = arrays.covariates @ params.nu_array
    return 1.0 + (arrays.b3_sum / arrays.effective_size) * lin + varphi * arrays.effective_size


def sandwich_covariance(
    providers: Sequence[ProviderSummary] | ProviderArrays,
    family: Family,
    fit_params: ConfoundingParams,
    null_set,
) -> np.ndarray:
    """Heteroskedasticity-consistent covariance of the covariate effects.

    Applies the White estimator to the linearized null model over the
    null-set rows.  The design is the same scaled one used for the robust
    initialization, ``sqrt(size/dispersion) * W``, so the result is on the
    scale of ``nu`` itself.
    """
    arrays = providers if isinstance(providers, ProviderArrays) else stack_providers(providers, family)
    mask = np.asarray(null_set, dtype=bool)
    if mask.shape != (len(arrays.ids),):
        raise ValidationError("null_set length must match the provider list")
    omega = _linearized_variance(arrays, family, fit_params)[mask]
    bad = np.flatnonzero(~(omega > 0))
    if bad.size:
        idx = np.flatnonzero(mask)[bad[0]]
        raise DegenerateWeightError(
            f"nonpositive sandwich weight for provider {arrays.ids[idx]!r}"
        )
    size = arrays.n_patients if family.kind == NORMAL else arrays.effective_size
    design = (np.sqrt(size / family.dispersion)[:, None] * arrays.covariates)[mask]
    p = design.shape[1]
    if np.linalg.matrix_rank(design) < p:
        raise SingularDesignError("null-set design matrix is rank-deficient")
    xtx = design.T @ design
    meat = design.T @ (omega[:, None] * design)
    cov = np.linalg.solve(xtx, np.linalg.solve(xtx, meat).T)
    return (cov + cov.T) / 2.0
