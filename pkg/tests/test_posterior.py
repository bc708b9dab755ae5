import math

import numpy as np
import pytest
import scipy.stats as st
from scipy.integrate import quad

from empnull import (
    BAYES_ADJUSTED,
    BAYES_NAIVE,
    FLAG_HIGH,
    FLAG_LOW,
    FLAG_NULL,
    FREQ_ADJUSTED,
    FREQ_NAIVE,
    LambdaPosterior,
    ValidationError,
    corrected_posterior,
    flag,
    lambda_posterior,
    nu_posterior,
    original_posterior,
)


class TestNuPosterior:
    def test_symmetric_shrinkage(self):
        post = nu_posterior([1.0, -2.0], np.eye(2), np.eye(2))
        assert post.mean == pytest.approx([0.5, -1.0], abs=1e-12)
        assert post.covariance == pytest.approx(np.eye(2) / 2.0, abs=1e-12)

    def test_flat_prior_limit(self):
        sigma_hat = np.array([[0.04, 0.01], [0.01, 0.09]])
        post = nu_posterior([0.8, -0.3], sigma_hat, 1e6 * np.eye(2))
        assert post.mean == pytest.approx([0.8, -0.3], rel=1e-4)
        assert post.covariance == pytest.approx(sigma_hat, rel=1e-4)

    def test_dogmatic_prior_pins_to_zero(self):
        post = nu_posterior([5.0], np.array([[0.2]]), np.zeros((1, 1)))
        assert post.mean == pytest.approx([0.0], abs=1e-12)
        assert post.covariance == pytest.approx(np.zeros((1, 1)), abs=1e-12)

    def test_asymmetric_matrix_rejected(self):
        with pytest.raises(ValidationError):
            nu_posterior([0.0, 0.0], np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestLambdaPosterior:
    def test_combines_effect_and_latent_variance(self):
        post = nu_posterior([0.5], np.array([[0.04]]), np.eye(1))
        lam = lambda_posterior(post, (2.0,), 0.1)
        assert lam.log_mean == pytest.approx(2.0 * post.mean[0])
        assert lam.log_variance == pytest.approx(4.0 * post.covariance[0, 0] + 0.1)

    def test_positive_whenever_latent_variance_positive(self):
        post = nu_posterior([0.0], np.array([[0.04]]), np.zeros((1, 1)))
        lam = lambda_posterior(post, (0.0,), 0.05)
        assert lam.log_variance == pytest.approx(0.05)


class TestOriginalPosterior:
    def test_zero_count_prior_only(self):
        post = original_posterior(0.0, 0.0)  # pure Gamma(2, 2)
        assert post.quantile(0.5) == pytest.approx(st.gamma.ppf(0.5, 2, scale=0.5), abs=1e-8)
        assert post.quantile(0.5) == pytest.approx(0.8392, abs=1e-4)

    def test_median_near_one_when_matched(self):
        post = original_posterior(20.0, 20.0)
        assert abs(post.quantile(0.5) - 1.0) < 0.03

    def test_mean_identity(self):
        post = original_posterior(17.0, 23.0)
        assert post.mean() == (17.0 + 2.0) / (23.0 + 2.0)

    def test_density_normalized(self):
        post = original_posterior(5.0, 4.0)
        mass, _ = quad(post.pdf, 0.0, np.inf)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValidationError):
            original_posterior(-1.0, 3.0)


class TestCorrectedPosterior:
    def test_degenerate_mixture_equals_conjugate(self):
        lam = LambdaPosterior(0.0, 0.0)
        adj = corrected_posterior(20.0, 20.0, lam)
        base = original_posterior(20.0, 20.0)
        grid = np.linspace(0.05, 3.0, 60)
        assert np.max(np.abs(adj.cdf(grid) - base.cdf(grid))) < 1e-6

    def test_deterministic_lambda_folds_into_rate(self):
        lam = LambdaPosterior(math.log(2.0), 0.0)
        adj = corrected_posterior(20.0, 10.0, lam)
        grid = np.linspace(0.05, 3.0, 60)
        want = st.gamma.cdf(grid, 22.0, scale=1.0 / 22.0)
        assert np.max(np.abs(adj.cdf(grid) - want)) < 1e-6

    def test_monte_carlo_mixture_oracle(self):
        lam = LambdaPosterior(0.0, 0.1)
        adj = corrected_posterior(20.0, 20.0, lam)
        rng = np.random.default_rng(2718)
        n = 10_000_000
        lam_draws = np.exp(rng.standard_normal(n) * math.sqrt(0.1))
        draws = rng.gamma(22.0, 1.0 / (20.0 * lam_draws + 2.0))
        for x in (0.6, 0.9, 1.0, 1.1, 1.5):
            hits = np.mean(draws <= x)
            se = math.sqrt(hits * (1.0 - hits) / n)
            assert abs(adj.cdf(x) - hits) < 3.0 * se

    def test_density_normalized(self):
        lam = LambdaPosterior(0.3, 0.2)
        adj = corrected_posterior(12.0, 9.0, lam)
        mass, _ = quad(adj.pdf, 0.0, np.inf, limit=200)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_stochastically_decreasing_in_log_mean(self):
        # more confounding lift means the corrected ratio shifts left
        lo = corrected_posterior(20.0, 20.0, LambdaPosterior(0.0, 0.1))
        hi = corrected_posterior(20.0, 20.0, LambdaPosterior(0.5, 0.1))
        for p in (0.1, 0.25, 0.5, 0.75, 0.9):
            assert hi.quantile(p) < lo.quantile(p)

    def test_cdf_monotone_with_proper_limits(self):
        adj = corrected_posterior(8.0, 6.0, LambdaPosterior(0.2, 0.3))
        grid = np.linspace(0.0, 25.0, 300)
        values = adj.cdf(grid)
        assert np.all(np.diff(values) >= -1e-12)
        assert values[0] == 0.0
        assert values[-1] > 1.0 - 1e-6

    def test_node_doubling_stability(self):
        lam = LambdaPosterior(0.1, 0.15)
        coarse = corrected_posterior(25.0, 22.0, lam, nodes=32)
        fine = corrected_posterior(25.0, 22.0, lam, nodes=64)
        for p in (0.025, 0.5, 0.975):
            assert abs(coarse.quantile(p) - fine.quantile(p)) < 1e-4

    def test_too_few_nodes_rejected(self):
        with pytest.raises(ValidationError):
            corrected_posterior(5.0, 5.0, LambdaPosterior(0.0, 0.1), nodes=4)


class TestQuantile:
    def test_monotone_in_order(self):
        post = corrected_posterior(15.0, 12.0, LambdaPosterior(0.1, 0.2))
        assert post.quantile(0.025) < post.quantile(0.5) < post.quantile(0.975)

    def test_inverse_identity(self):
        for post in (
            original_posterior(0.0, 0.0),
            corrected_posterior(15.0, 12.0, LambdaPosterior(0.1, 0.2)),
        ):
            for p in (0.025, 0.5, 0.975):
                assert post.cdf(post.quantile(p)) == pytest.approx(p, abs=1e-7)

    def test_order_must_be_interior(self):
        post = original_posterior(3.0, 3.0)
        with pytest.raises(ValidationError):
            post.quantile(0.0)


class TestFlag:
    def test_zero_z_is_null(self):
        assert flag("a", FREQ_ADJUSTED, z=0.0).flag == FLAG_NULL

    def test_z_threshold_two_sided(self):
        assert flag("a", FREQ_NAIVE, z=2.0).flag == FLAG_HIGH
        assert flag("a", FREQ_NAIVE, z=-2.0).flag == FLAG_LOW
        assert flag("a", FREQ_NAIVE, z=1.9).flag == FLAG_NULL

    def test_low_count_with_large_expectation_flags_low(self):
        post = original_posterior(0.0, 198.0)  # Gamma(2, 200)
        decision = flag("a", BAYES_NAIVE, posterior=post)
        assert post.quantile(0.975) < 1.0
        assert decision.flag == FLAG_LOW

    def test_interval_containing_one_is_null(self):
        post = original_posterior(20.0, 20.0)
        decision = flag("a", BAYES_NAIVE, posterior=post)
        assert decision.interval[0] < 1.0 < decision.interval[1]
        assert decision.flag == FLAG_NULL

    def test_degenerate_adjustment_matches_naive_flags(self):
        # zero prior and zero latent variance collapse the corrected
        # posterior onto the conjugate one for every provider
        rng = np.random.default_rng(12)
        nu_post = nu_posterior([0.7], np.array([[0.05]]), np.zeros((1, 1)))
        for _ in range(20):
            o = float(rng.integers(0, 200))
            e = float(rng.uniform(1.0, 200.0))
            w = float(rng.standard_normal())
            lam = lambda_posterior(nu_post, (w,), 0.0)
            naive = flag("a", BAYES_NAIVE, posterior=original_posterior(o, e))
            adj = flag("a", BAYES_ADJUSTED,
                       posterior=corrected_posterior(o, e, lam))
            assert adj.flag == naive.flag

    def test_flag_equivalent_to_cdf_at_reference(self):
        # interval position against 1 is the same information as CDF(1)
        for o, e in ((3.0, 30.0), (30.0, 3.0), (20.0, 20.0)):
            post = original_posterior(o, e)
            decision = flag("a", BAYES_NAIVE, posterior=post, level=0.05)
            c1 = post.cdf(1.0)
            if c1 > 0.975:
                assert decision.flag == FLAG_LOW
            elif c1 < 0.025:
                assert decision.flag == FLAG_HIGH
            else:
                assert decision.flag == FLAG_NULL

    def test_level_validated(self):
        with pytest.raises(ValidationError):
            flag("a", FREQ_NAIVE, z=0.0, level=1.5)

    def test_frequentist_needs_z(self):
        with pytest.raises(ValidationError):
            flag("a", FREQ_NAIVE)
