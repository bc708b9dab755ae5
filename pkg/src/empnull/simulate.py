"""Synthetic-data laboratory for the estimation and flagging experiments.

Two generators:

* :func:`generate` -- the provider-outlier design: a standard-normal
  provider covariate, a latent normal provider effect, and an outlier
  fraction whose quality effect is ``c + coupling * W``.  Outcomes are
  drawn patient-level from the family's GLM and aggregated to summaries,
  with the expected counts computed from the true patient model (the
  patient-level adjustment is assumed correct).
* :func:`generate_cre` -- the correlated-random-effects design: provider
  effects proportional to the provider mean of a patient covariate plus a
  (possibly contaminated) normal deviation; the centered covariate means
  are handed to the estimator as the observed provider covariate.

Replicates run on counter-based substreams (one child seed per replicate
index), so results are bit-identical no matter how many workers execute
them or in which order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmpnullError, FitFailureError, ScenarioError, ValidationError
from .fitting import EnFit, FitConfig, fit
from .posterior import (
    BAYES_ADJUSTED,
    BAYES_NAIVE,
    FLAG_HIGH,
    FLAG_LOW,
    FLAG_NULL,
    FREQ_ADJUSTED,
    FREQ_NAIVE,
    METHODS,
    corrected_posterior,
    flag,
    lambda_posterior,
    nu_posterior,
    original_posterior,
)
from .summaries import (
    NORMAL,
    POISSON,
    ConfoundingParams,
    Family,
    ProviderSummary,
    corrected_z_many,
    naive_z_many,
    stack_providers,
)

# Poisson rates above exp(30) would overflow the aggregate draw.
_PREDICTOR_CAP = 30.0


def _rng(seed: int, replicate: int | None = None) -> np.random.Generator:
    if replicate is None:
        ss = np.random.SeedSequence(seed)
    else:
        ss = np.random.SeedSequence(seed, spawn_key=(replicate,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimScenario:
    """Provider-outlier experiment configuration."""

    n_providers: int = 200
    n_per_provider: int = 100
    family: Family = Family.poisson()
    nu: tuple[float, ...] = (0.25,)
    sigma2_alpha: float = 0.1
    outlier_proportion: float = 0.0
    outlier_effect: float = 2.0
    outlier_w_coupling: float = 0.5
    mu_star: float = 0.0
    beta: tuple[float, ...] = ()
    seed: int = 0
    target_w: float | None = None
    target_gamma: float | None = None

    def __post_init__(self):
        if self.n_providers < 2:
            raise ScenarioError("need at least two providers")
        if self.n_per_provider < 1:
            raise ScenarioError("need at least one patient per provider")
        if not 0.0 <= self.outlier_proportion < 1.0:
            raise ScenarioError("outlier proportion must be in [0, 1)")
        if self.sigma2_alpha < 0:
            raise ScenarioError("sigma2_alpha must be nonnegative")
        if self.family.kind not in (POISSON, NORMAL):
            raise ScenarioError(
                "the generator draws Poisson or normal outcomes; other families "
                "are estimator-side choices"
            )
        object.__setattr__(self, "nu", tuple(float(v) for v in np.atleast_1d(self.nu)))
        object.__setattr__(self, "beta", tuple(float(v) for v in np.atleast_1d(self.beta)) if len(np.atleast_1d(self.beta)) else ())
        if self.target_w is not None and len(self.nu) != 1:
            raise ScenarioError("targeted scenarios require a single covariate")

    @property
    def nu_true(self) -> tuple[float, ...]:
        return self.nu

    @property
    def sigma2_true(self) -> float:
        return self.sigma2_alpha


@dataclass(frozen=True)
class CreScenario:
    """Correlated-random-effects experiment configuration (normal outcomes)."""

    xi: float = 0.25
    sigma2_tau: float = 0.1
    contamination: float = 0.0
    x_mean_dist: tuple[float, float] = (-0.4, 0.25)  # (mean, variance) of provider covariate means
    x_within_variance: float = 0.25
    n_providers: int = 200
    n_per_provider: int = 100
    mu_star: float = -6.0
    beta: float = 1.0
    dispersion: float = 1.0
    outlier_shift: float = 5.0  # contaminated deviations shift by +-shift*sigma_tau
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.contamination < 1.0:
            raise ScenarioError("contamination must be in [0, 1)")
        if self.n_providers < 2:
            raise ScenarioError("need at least two providers")
        if self.sigma2_tau <= 0 or self.x_within_variance <= 0 or self.dispersion <= 0:
            raise ScenarioError("variances must be positive")

    @property
    def family(self) -> Family:
        return Family.normal(self.dispersion)

    @property
    def nu_true(self) -> tuple[float, ...]:
        return (self.xi,)

    @property
    def sigma2_true(self) -> float:
        return self.sigma2_tau


@dataclass(frozen=True)
class SimTruth:
    """Ground truth attached to a generated dataset."""

    gamma_star: np.ndarray
    alpha: np.ndarray
    w: np.ndarray
    is_null: np.ndarray


def generate(
    scenario: SimScenario, replicate: int | None = None
) -> tuple[list[ProviderSummary], SimTruth]:
    """Draw one provider-outlier dataset.

    The draw order (covariate, latent effect, outlier uniforms, patient
    covariates, outcomes) is fixed so that scenarios differing only in the
    outlier proportion share their base randomness on a common seed.
    """
    rng = _rng(scenario.seed, replicate)
    n_prov, n_pat = scenario.n_providers, scenario.n_per_provider
    p = len(scenario.nu)
    w = rng.standard_normal((n_prov, p))
    alpha = rng.standard_normal(n_prov) * math.sqrt(scenario.sigma2_alpha)
    u_outlier = rng.random(n_prov)

    if scenario.target_w is not None:
        w[0, 0] = scenario.target_w
    is_outlier = u_outlier < scenario.outlier_proportion
    if scenario.target_gamma is not None:
        is_outlier[0] = False
    gamma = np.where(
        is_outlier,
        scenario.outlier_effect + scenario.outlier_w_coupling * w[:, 0],
        0.0,
    )
    if scenario.target_gamma is not None:
        gamma[0] = scenario.target_gamma

    nu = np.asarray(scenario.nu)
    shift = gamma + w @ nu + alpha  # provider-level departure from theta0

    k = len(scenario.beta)
    if k:
        x = rng.standard_normal((n_prov, n_pat, k))
        theta0 = scenario.mu_star + x @ np.asarray(scenario.beta)  # (I, n)
    else:
        theta0 = np.full((n_prov, 1), scenario.mu_star)

    if scenario.family.kind == POISSON:
        if float(np.max(theta0.max(axis=1) + shift)) > _PREDICTOR_CAP:
            raise ScenarioError(
                f"linear predictor exceeds {_PREDICTOR_CAP}; Poisson rates would overflow"
            )
        base = np.exp(theta0)
        expected = base.sum(axis=1) if k else base[:, 0] * n_pat
        observed = rng.poisson(expected * np.exp(shift)).astype(float)
        effective = expected
        providers = [
            ProviderSummary(
                id=f"p{i + 1:04d}",
                observed=observed[i],
                expected=expected[i],
                effective_size=effective[i],
                covariates=tuple(w[i]),
                n_patients=n_pat,
                b3_sum=effective[i],
            )
            for i in range(n_prov)
        ]
    else:  # normal outcomes
        sum_theta0 = theta0.sum(axis=1) if k else theta0[:, 0] * n_pat
        noise = rng.standard_normal(n_prov) * math.sqrt(n_pat * scenario.family.dispersion)
        observed = sum_theta0 + n_pat * shift + noise
        providers = [
            ProviderSummary(
                id=f"p{i + 1:04d}",
                observed=observed[i],
                expected=sum_theta0[i],
                effective_size=float(n_pat),
                covariates=tuple(w[i]),
                n_patients=n_pat,
                b3_sum=0.0,
            )
            for i in range(n_prov)
        ]
    truth = SimTruth(gamma_star=gamma, alpha=alpha, w=w, is_null=gamma == 0.0)
    return providers, truth


def generate_cre(
    scenario: CreScenario, replicate: int | None = None
) -> tuple[list[ProviderSummary], SimTruth]:
    """Draw one correlated-random-effects dataset (normal outcomes).

    The estimator sees the centered provider covariate means as the
    observed confounder; the expected counts come from a population norm
    that absorbs the average confounding, which is what a risk model fit
    without the provider-mean covariate would deliver.
    """
    rng = _rng(scenario.seed, replicate)
    n_prov, n_pat = scenario.n_providers, scenario.n_per_provider
    mx_mean, mx_var = scenario.x_mean_dist
    m_x = mx_mean + rng.standard_normal(n_prov) * math.sqrt(mx_var)
    x = m_x[:, None] + rng.standard_normal((n_prov, n_pat)) * math.sqrt(
        scenario.x_within_variance
    )
    u_contam = rng.random(n_prov)
    u_sign = rng.random(n_prov)
    tau_noise = rng.standard_normal(n_prov)
    noise = rng.standard_normal(n_prov)

    sigma_tau = math.sqrt(scenario.sigma2_tau)
    contaminated = u_contam < scenario.contamination
    sign = np.where(u_sign < 0.5, -1.0, 1.0)
    tau = tau_noise * sigma_tau + np.where(
        contaminated, sign * scenario.outlier_shift * sigma_tau, 0.0
    )

    xbar = x.mean(axis=1)
    w = xbar - xbar.mean()
    gamma = scenario.xi * xbar + tau
    mu0 = scenario.mu_star + scenario.xi * xbar.mean()

    sum_x = x.sum(axis=1)
    sum_theta_star = n_pat * (scenario.mu_star + gamma) + scenario.beta * sum_x
    expected = n_pat * mu0 + scenario.beta * sum_x
    observed = sum_theta_star + noise * math.sqrt(n_pat * scenario.dispersion)

    providers = [
        ProviderSummary(
            id=f"p{i + 1:04d}",
            observed=observed[i],
            expected=expected[i],
            effective_size=float(n_pat),
            covariates=(float(w[i]),),
            n_patients=n_pat,
            b3_sum=0.0,
        )
        for i in range(n_prov)
    ]
    truth = SimTruth(gamma_star=gamma, alpha=tau, w=w[:, None], is_null=~contaminated)
    return providers, truth


# ---------------------------------------------------------------------------
# Replicated experiments
# ---------------------------------------------------------------------------

@dataclass
class ReplicateMetrics:
    """Accumulated results of a replicated experiment.

    Raw per-replicate arrays are kept so callers can run paired
    comparisons; the convenience properties aggregate them.
    """

    scenario: object
    level: float
    methods: tuple[str, ...]
    n_reps: int
    n_failed: int
    failures: tuple[str, ...]
    nu_err: np.ndarray  # (R, P), robust fit minus truth
    s2a_err: np.ndarray
    baseline_nu_err: np.ndarray
    baseline_s2a_err: np.ndarray
    pi0: np.ndarray
    n_null: np.ndarray
    flags: dict[str, np.ndarray] | None  # per-method decision strings for the target
    target_is_null: bool | None

    @property
    def bias_nu(self) -> np.ndarray:
        return self.nu_err.mean(axis=0)

    @property
    def bias_sigma2_alpha(self) -> float:
        return float(self.s2a_err.mean())

    @property
    def mse_nu(self) -> np.ndarray:
        return (self.nu_err**2).mean(axis=0)

    @property
    def baseline_bias_nu(self) -> np.ndarray:
        return self.baseline_nu_err.mean(axis=0)

    @property
    def baseline_bias_sigma2_alpha(self) -> float:
        return float(self.baseline_s2a_err.mean())

    @property
    def baseline_mse_nu(self) -> np.ndarray:
        return (self.baseline_nu_err**2).mean(axis=0)

    def flag_rate(self, method: str) -> float:
        """Share of replicates flagging the target in either direction."""
        if self.flags is None:
            raise ValidationError("scenario had no flagging target")
        return float(np.mean(self.flags[method] != FLAG_NULL))

    def flag_rate_se(self, method: str) -> float:
        r = self.flag_rate(method)
        return math.sqrt(r * (1.0 - r) / len(self.flags[method]))

    @property
    def ffp(self) -> dict[str, float] | None:
        """False-flagging probability per method (target truly null)."""
        if self.flags is None or not self.target_is_null:
            return None
        return {m: self.flag_rate(m) for m in self.methods}

    @property
    def tfp(self) -> dict[str, float] | None:
        """True-flagging probability per method (direction-correct flags only)."""
        if self.flags is None or self.target_is_null:
            return None
        want = FLAG_LOW if _target_gamma(self.scenario) < 0 else FLAG_HIGH
        return {m: float(np.mean(self.flags[m] == want)) for m in self.methods}


def _target_gamma(scenario) -> float:
    return getattr(scenario, "target_gamma", None) or 0.0


def _has_target(scenario) -> bool:
    return (
        getattr(scenario, "target_w", None) is not None
        or getattr(scenario, "target_gamma", None) is not None
    )


def _run_one(
    scenario,
    rep: int,
    level: float,
    cfg: FitConfig,
    base_cfg: FitConfig,
    prior_cov: np.ndarray,
    methods: tuple[str, ...],
    nodes: int,
    want_flags: bool,
):
    if isinstance(scenario, CreScenario):
        providers, truth = generate_cre(scenario, rep)
    else:
        providers, truth = generate(scenario, rep)
    family = scenario.family
    nu_true = np.asarray(scenario.nu_true)
    try:
        efit = fit(providers, family, cfg)
        bfit = fit(providers, family, base_cfg)
        record = {
            "nu_err": efit.params.nu_array - nu_true,
            "s2a_err": efit.params.sigma2_alpha - scenario.sigma2_true,
            "b_nu_err": bfit.params.nu_array - nu_true,
            "b_s2a_err": bfit.params.sigma2_alpha - scenario.sigma2_true,
            "pi0": efit.pi0,
            "n_null": efit.n_null,
        }
        if want_flags:
            record["flags"] = _flag_target(providers[0], family, efit, prior_cov, methods, nodes, level)
        return record
    except EmpnullError as exc:
        return {"error": f"replicate {rep}: {exc}"}


def _flag_target(target, family, efit: EnFit, prior_cov, methods, nodes, level):
    arrays = stack_providers([target], family)
    z0 = float(naive_z_many(arrays, family)[0])
    decisions = {}
    if FREQ_NAIVE in methods:
        decisions[FREQ_NAIVE] = flag(target.id, FREQ_NAIVE, z=z0, level=level).flag
    if FREQ_ADJUSTED in methods:
        cz0 = float(corrected_z_many(arrays, family, efit.params)[0])
        decisions[FREQ_ADJUSTED] = flag(target.id, FREQ_ADJUSTED, z=cz0, level=level).flag
    if BAYES_NAIVE in methods:
        post = original_posterior(target.observed, target.expected)
        decisions[BAYES_NAIVE] = flag(target.id, BAYES_NAIVE, posterior=post, level=level).flag
    if BAYES_ADJUSTED in methods:
        if efit.covariance is None:
            raise FitFailureError("covariance unavailable for the adjusted credible flag")
        nup = nu_posterior(efit.params.nu_array, efit.covariance, prior_cov)
        lam = lambda_posterior(nup, target.covariates, efit.params.sigma2_alpha)
        post = corrected_posterior(
            target.observed, target.expected, lam, nodes, check_stability=False
        )
        decisions[BAYES_ADJUSTED] = flag(target.id, BAYES_ADJUSTED, posterior=post, level=level).flag
    return decisions


def run_replicates(
    scenario,
    n_reps: int,
    methods: Sequence[str] = METHODS,
    *,
    level: float = 0.05,
    fit_config: FitConfig | None = None,
    prior_covariance=None,
    nodes: int = 64,
    threads: int = 1,
    max_failure_share: float = 0.1,
) -> ReplicateMetrics:
    """Generate -> fit -> flag across replicates and accumulate metrics.

    Each replicate runs on its own counter-derived substream and failed
    replicates are dropped (the run errors out if more than
    ``max_failure_share`` of them fail).  Results are merged by replicate
    index, so the output does not depend on the worker count.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be at least 1")
    methods = tuple(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown methods: {unknown}")
    family = scenario.family
    if family.kind == NORMAL and (BAYES_NAIVE in methods or BAYES_ADJUSTED in methods):
        raise ScenarioError("credible-interval methods apply to count outcomes only")
    cfg = fit_config or FitConfig()
    base_cfg = FitConfig(
        baseline=True,
        interval_multiplier=cfg.interval_multiplier,
        nm_f_tol=cfg.nm_f_tol,
        nm_max_iter=cfg.nm_max_iter,
        huber_tuning=cfg.huber_tuning,
        compute_covariance=False,
    )
    p = len(scenario.nu_true)
    prior_cov = np.eye(p) if prior_covariance is None else np.asarray(prior_covariance, dtype=float)
    want_flags = _has_target(scenario)

    task = lambda rep: _run_one(
        scenario, rep, level, cfg, base_cfg, prior_cov, methods, nodes, want_flags
    )
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(task, range(n_reps)))
    else:
        records = [task(rep) for rep in range(n_reps)]

    failures = tuple(r["error"] for r in records if "error" in r)
    good = [r for r in records if "error" not in r]
    if len(failures) > max_failure_share * n_reps:
        raise FitFailureError(
            f"{len(failures)} of {n_reps} replicates failed", list(failures)
        )
    flags = None
    if want_flags and good:
        flags = {
            m: np.array([r["flags"][m] for r in good], dtype=object) for m in methods if m in good[0]["flags"]
        }
    return ReplicateMetrics(
        scenario=scenario,
        level=level,
        methods=methods,
        n_reps=n_reps,
        n_failed=len(failures),
        failures=failures,
        nu_err=np.array([r["nu_err"] for r in good]).reshape(len(good), p),
        s2a_err=np.array([r["s2a_err"] for r in good]),
        baseline_nu_err=np.array([r["b_nu_err"] for r in good]).reshape(len(good), p),
        baseline_s2a_err=np.array([r["b_s2a_err"] for r in good]),
        pi0=np.array([r["pi0"] for r in good]),
        n_null=np.array([r["n_null"] for r in good]),
        flags=flags,
        target_is_null=(_target_gamma(scenario) == 0.0) if want_flags else None,
    )
