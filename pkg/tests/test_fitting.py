import math

import numpy as np
import pytest
import scipy.stats as st

from empnull import (
    ConfoundingParams,
    Family,
    FitConfig,
    InvalidStartError,
    NoNullProvidersError,
    NullInterval,
    ProviderSummary,
    SingularDesignError,
    ValidationError,
    fit,
    log_likelihood,
    nelder_mead,
    null_intervals,
    sandwich_covariance,
)
from empnull.robust import InitEstimate
from empnull.simulate import SimScenario, generate
from conftest import make_provider, poisson_null_dataset


def loglik_oracle(providers, family, params, pi0, intervals, null_set):
    """Independent term-by-term evaluation via scipy distributions."""
    from empnull import naive_z, null_moments

    total = 0.0
    for p, iv, is_null in zip(providers, intervals, null_set):
        m = null_moments(p, family, params)
        sd = math.sqrt(m.variance)
        z = naive_z(p, family)
        if is_null:
            total += math.log(pi0) + st.norm.logpdf(z, loc=m.mean, scale=sd)
        else:
            q = st.norm.cdf(iv.upper, m.mean, sd) - st.norm.cdf(iv.lower, m.mean, sd)
            total += math.log(1.0 - pi0 * q)
    return total


class TestNullIntervals:
    def test_standard_normal_band_at_null_params(self, poisson):
        providers = [make_provider(f"p{i}", covariates=(float(i),)) for i in range(4)]
        init = InitEstimate((0.0,), 1.0, 0.0)
        for iv in null_intervals(providers, poisson, init):
            assert iv.lower == pytest.approx(-1.96, abs=1e-12)
            assert iv.upper == pytest.approx(1.96, abs=1e-12)

    def test_normal_family_substitution(self):
        p = make_provider(covariates=(1.0,), n_patients=100)
        (iv,) = null_intervals([p], Family.normal(1.0), InitEstimate((0.25,), 1.0, 0.1))
        root = math.sqrt(11.0)
        assert iv.lower == pytest.approx(2.5 - 1.96 * root, abs=1e-12)
        assert iv.upper == pytest.approx(2.5 + 1.96 * root, abs=1e-12)

    def test_width_increases_with_effective_size(self, poisson):
        init = InitEstimate((0.1,), 1.0, 0.05)
        widths = []
        for neff in (20.0, 80.0, 320.0):
            p = make_provider(effective_size=neff, expected=neff, covariates=(0.5,))
            (iv,) = null_intervals([p], poisson, init)
            widths.append(iv.upper - iv.lower)
        assert widths[0] < widths[1] < widths[2]

    def test_interval_ordering_enforced(self):
        with pytest.raises(ValidationError):
            NullInterval(2.0, -2.0)


class TestLogLikelihood:
    def test_single_null_provider_standard_normal(self, poisson):
        p = make_provider()  # z = 0
        params = ConfoundingParams((0.0,), 0.0)
        iv = [NullInterval(-1.96, 1.96)]
        value = log_likelihood([p], poisson, params, 1.0, iv, [True])
        assert value == pytest.approx(-0.9189385, abs=1e-7)

    def test_single_excluded_provider_survival_term(self, poisson):
        p = make_provider()
        params = ConfoundingParams((0.0,), 0.0)
        iv = [NullInterval(-1.96, 1.96)]
        value = log_likelihood([p], poisson, params, 1.0, iv, [False])
        q = st.norm.cdf(1.96) - st.norm.cdf(-1.96)
        assert q == pytest.approx(0.9500042, abs=1e-7)
        assert value == pytest.approx(math.log(1.0 - q), abs=1e-9)
        assert value == pytest.approx(-2.9957, abs=1e-3)

    def test_mixed_set_matches_scripted_oracle(self, poisson):
        rng = np.random.default_rng(31)
        providers = poisson_null_dataset(rng, n=12)
        params = ConfoundingParams((0.3,), 0.15)
        intervals = null_intervals(providers, poisson, InitEstimate((0.2,), 1.0, 0.1))
        from empnull import naive_z
        null_set = [
            iv.lower <= naive_z(p, poisson) <= iv.upper
            for p, iv in zip(providers, intervals)
        ]
        got = log_likelihood(providers, poisson, params, 0.5, intervals, null_set)
        want = loglik_oracle(providers, poisson, params, 0.5, intervals, null_set)
        assert got == pytest.approx(want, rel=1e-12)

    def test_pi0_out_of_range_rejected(self, poisson):
        p = make_provider()
        iv = [NullInterval(-1.96, 1.96)]
        with pytest.raises(ValidationError):
            log_likelihood([p], poisson, ConfoundingParams((0.0,), 0.0), 0.0, iv, [True])

    def test_moving_null_z_away_from_mean_decreases_loglik(self, poisson):
        params = ConfoundingParams((0.0,), 0.0)
        iv = [NullInterval(-10.0, 10.0)]
        values = []
        for obs in (100.0, 110.0, 120.0):
            p = make_provider(observed=obs)
            values.append(log_likelihood([p], poisson, params, 1.0, iv, [True]))
        assert values[0] > values[1] > values[2]


class TestNelderMead:
    def test_quadratic_bowl(self):
        res = nelder_mead(lambda x: -((x[0] - 1.0) ** 2 + (x[1] - 2.0) ** 2), np.zeros(2))
        assert res.converged
        assert res.x == pytest.approx([1.0, 2.0], abs=1e-5)

    def test_flat_quartic(self):
        res = nelder_mead(lambda x: -((x[0] - 3.0) ** 4), np.array([0.0]))
        assert res.x[0] == pytest.approx(3.0, abs=1e-3)

    def test_invalid_start_raises(self):
        with pytest.raises(InvalidStartError):
            nelder_mead(lambda x: -math.inf, np.zeros(2))

    def test_never_worse_than_start(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            a = rng.standard_normal(3)
            f = lambda x: -np.sum((x - a) ** 2) + math.sin(x[0] * 5.0)
            start = rng.standard_normal(3)
            res = nelder_mead(f, start, max_iter=40)
            assert res.value >= f(start)


class TestFit:
    def test_all_inside_with_unit_grid_matches_baseline(self, poisson):
        rng = np.random.default_rng(4)
        providers = poisson_null_dataset(rng, n=10, nu=0.0, sigma2_alpha=0.0)
        cfg = FitConfig(pi0_grid=(1.0,), refit_intervals=0, compute_covariance=False,
                        interval_multiplier=10.0)
        base = FitConfig(baseline=True, compute_covariance=False)
        robust = fit(providers, poisson, cfg)
        baseline = fit(providers, poisson, base)
        assert robust.null_set.all()
        assert robust.pi0 == baseline.pi0 == 1.0
        assert robust.params.nu == pytest.approx(baseline.params.nu, abs=1e-12)
        assert robust.params.sigma2_alpha == pytest.approx(
            baseline.params.sigma2_alpha, abs=1e-12
        )
        assert robust.loglik == pytest.approx(baseline.loglik, abs=1e-12)

    def test_provider_order_invariance(self, poisson):
        providers, _ = generate(SimScenario(seed=5, outlier_proportion=0.1), 0)
        rng = np.random.default_rng(13)
        shuffled = list(providers)
        rng.shuffle(shuffled)
        a = fit(providers, poisson, FitConfig(compute_covariance=False))
        b = fit(shuffled, poisson, FitConfig(compute_covariance=False))
        assert b.params.nu == pytest.approx(a.params.nu, abs=1e-8)
        assert b.params.sigma2_alpha == pytest.approx(a.params.sigma2_alpha, abs=1e-8)
        assert b.pi0 == a.pi0

    def test_optimizer_never_worse_than_start_on_grid(self, poisson):
        providers, _ = generate(SimScenario(seed=6, outlier_proportion=0.0), 0)
        efit = fit(providers, poisson, FitConfig(refit_intervals=0))
        start = ConfoundingParams(efit.init.nu0, efit.init.sigma2_alpha0)
        for pi0, best in zip(efit.pi0_grid, efit.grid_loglik):
            at_start = log_likelihood(
                providers, poisson, start, pi0, efit.intervals, efit.null_set
            )
            assert best >= at_start - 1e-9

    def test_sigma2_alpha_nonnegative(self, poisson):
        rng = np.random.default_rng(14)
        providers = poisson_null_dataset(rng, n=30, nu=0.0, sigma2_alpha=0.0)
        efit = fit(providers, poisson, FitConfig(compute_covariance=False))
        assert efit.params.sigma2_alpha >= 0.0

    def test_pi0_concentrates_near_one_without_outliers(self, poisson):
        hits = 0
        for rep in range(25):
            providers, _ = generate(SimScenario(seed=321, outlier_proportion=0.0), rep)
            efit = fit(providers, poisson, FitConfig(compute_covariance=False))
            hits += efit.pi0 >= 0.9
        assert hits >= 20  # >= 80 percent of replicates

    def test_empty_null_set_rejected(self, poisson):
        # huge z-scores with tiny intervals: nothing inside
        providers = [
            make_provider(f"p{i}", observed=1000.0 + i, covariates=(float(i) / 10.0,))
            for i in range(8)
        ]
        with pytest.raises(NoNullProvidersError):
            fit(providers, poisson, FitConfig(interval_multiplier=1e-6))

    def test_too_few_providers_rejected(self, poisson):
        providers = [make_provider("a", covariates=(0.3,)), make_provider("b", covariates=(0.4,))]
        with pytest.raises(ValidationError):
            fit(providers, poisson)


class TestSandwichCovariance:
    def test_identity_design_identity_weights(self, poisson):
        n = 4
        providers = [
            make_provider(f"p{i}", observed=1.0, expected=1.0, effective_size=1.0,
                          covariates=tuple(1.0 if j == i else 0.0 for j in range(n)))
            for i in range(n)
        ]
        params = ConfoundingParams((0.0,) * n, 0.0)
        cov = sandwich_covariance(providers, poisson, params, [True] * n)
        assert cov == pytest.approx(np.eye(n), abs=1e-12)

    def test_single_column_scalar_sandwich(self, poisson):
        w = np.array([0.5, -1.0, 2.0, 0.25, -0.75])
        providers = [
            make_provider(f"p{i}", observed=1.0, expected=1.0, effective_size=1.0,
                          covariates=(float(w[i]),))
            for i in range(len(w))
        ]
        params = ConfoundingParams((0.0,), 0.0)
        cov = sandwich_covariance(providers, poisson, params, [True] * len(w))
        assert cov[0, 0] == pytest.approx(1.0 / float(w @ w), rel=1e-12)

    def test_symmetric_positive_semidefinite(self, poisson):
        providers, _ = generate(SimScenario(seed=8, nu=(0.2, -0.1), outlier_proportion=0.0), 0)
        efit = fit(providers, poisson, FitConfig(compute_covariance=False))
        cov = sandwich_covariance(providers, poisson, efit.params, efit.null_set)
        assert np.max(np.abs(cov - cov.T)) < 1e-12
        assert np.linalg.eigvalsh(cov).min() >= -1e-12

    def test_rank_deficient_null_design_rejected(self, poisson):
        providers = [
            make_provider(f"p{i}", covariates=(1.0, 1.0)) for i in range(6)
        ]
        with pytest.raises(SingularDesignError):
            sandwich_covariance(providers, poisson, ConfoundingParams((0.0, 0.0), 0.0), [True] * 6)

    def test_degenerate_weight_rejected(self, poisson):
        p = make_provider("neg", covariates=(1.0,), effective_size=2.0, expected=2.0)
        params = ConfoundingParams((-20.0,), 0.0)  # 1 + W'nu + phi*neff < 0
        from empnull import DegenerateWeightError
        with pytest.raises(DegenerateWeightError):
            sandwich_covariance([p], poisson, params, [True])

    def test_fit_covariance_present_and_spd(self, poisson):
        providers, _ = generate(SimScenario(seed=9, outlier_proportion=0.0), 0)
        efit = fit(providers, poisson)
        assert efit.covariance is not None
        assert efit.covariance[0, 0] > 0
