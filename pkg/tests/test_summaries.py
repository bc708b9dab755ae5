import math

import numpy as np
import pytest

from empnull import (
    ConfoundingParams,
    DegenerateVarianceError,
    Family,
    ProviderSummary,
    ValidationError,
    corrected_z,
    corrected_z_many,
    naive_z,
    null_moments,
    null_moments_many,
    stack_providers,
)
from conftest import make_provider


class TestFamily:
    def test_poisson_forces_unit_dispersion(self):
        assert Family.poisson().dispersion == 1.0
        with pytest.raises(ValidationError):
            Family("poisson", 2.0)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValidationError):
            Family("weibull", 1.0)

    def test_rejects_nonpositive_dispersion(self):
        with pytest.raises(ValidationError):
            Family.normal(0.0)
        with pytest.raises(ValidationError):
            Family.quasi_poisson(-1.0)


class TestProviderValidation:
    def test_nonfinite_rejected(self):
        with pytest.raises(ValidationError):
            make_provider(observed=float("nan"))
        with pytest.raises(ValidationError):
            make_provider(expected=float("inf"))

    def test_effective_size_positive(self):
        with pytest.raises(ValidationError):
            make_provider(effective_size=0.0)

    def test_count_family_requires_counts(self, poisson):
        bad = make_provider(observed=-1.0)
        with pytest.raises(ValidationError):
            stack_providers([bad], poisson)

    def test_normal_family_requires_n_patients(self):
        p = ProviderSummary("a", 1.0, 1.0, 10.0, (0.0,))
        with pytest.raises(ValidationError):
            stack_providers([p], Family.normal(1.0))

    def test_covariate_length_must_match(self, poisson):
        a = make_provider("a", covariates=(0.0,))
        b = make_provider("b", covariates=(0.0, 1.0))
        with pytest.raises(ValidationError):
            stack_providers([a, b], poisson)


class TestNaiveZ:
    def test_zero_when_observed_equals_expected(self, poisson):
        assert naive_z(make_provider(observed=9, expected=9, effective_size=4), poisson) == 0.0

    def test_exact_arithmetic(self, poisson):
        assert naive_z(make_provider(observed=12, expected=9, effective_size=9), poisson) == 1.0

    def test_quasi_poisson_dispersion_scales_denominator(self):
        fam = Family.quasi_poisson(4.0)
        assert naive_z(make_provider(observed=12, expected=9, effective_size=9), fam) == 0.5

    def test_antisymmetric_in_residual(self, poisson):
        rng = np.random.default_rng(5)
        for _ in range(25):
            e = rng.uniform(1, 50)
            d = rng.uniform(0, 20)
            up = naive_z(make_provider(observed=e + d, expected=e, effective_size=e), poisson)
            dn = naive_z(make_provider(observed=e - d, expected=e, effective_size=e), poisson)
            assert up == pytest.approx(-dn, abs=1e-12)


ALL_FAMILIES = [
    Family.poisson(),
    Family.quasi_poisson(2.5),
    Family.normal(1.7),
    Family.exp_family(1.3),
]


class TestNullMoments:
    def test_poisson_identities_at_zero(self, poisson):
        m = null_moments(make_provider(), poisson, ConfoundingParams((0.0,), 0.0))
        assert m.mean == 0.0
        assert m.variance == 1.0

    @pytest.mark.parametrize("family", ALL_FAMILIES, ids=lambda f: f.kind)
    def test_every_family_standardizes_at_null_params(self, family):
        p = make_provider(covariates=(0.7, -0.3), n_patients=100)
        m = null_moments(p, family, ConfoundingParams((0.0, 0.0), 0.0))
        assert m.mean == 0.0
        assert m.variance == 1.0

    def test_normal_direct_substitution(self):
        # n=100, sigma2_eps=1, W'nu=0.25, sigma2_alpha=0.1
        p = make_provider(covariates=(1.0,), n_patients=100)
        m = null_moments(p, Family.normal(1.0), ConfoundingParams((0.25,), 0.1))
        assert m.mean == pytest.approx(2.5, abs=1e-12)
        assert m.variance == pytest.approx(11.0, abs=1e-12)

    def test_poisson_monte_carlo_oracle(self, poisson):
        # neff=100, W'nu=0.2, sigma2_alpha=0.1 against 1e6 simulated null providers
        neff, wnu, s2a = 100.0, 0.2, 0.1
        rng = np.random.default_rng(1234)
        n = 1_000_000
        alpha = rng.standard_normal(n) * math.sqrt(s2a)
        obs = rng.poisson(neff * np.exp(wnu + alpha))
        z = (obs - neff) / math.sqrt(neff)
        m = null_moments(make_provider(covariates=(1.0,), effective_size=neff, expected=neff),
                         poisson, ConfoundingParams((wnu,), s2a))
        se_mean = z.std() / math.sqrt(n)
        assert abs(z.mean() - m.mean) < 3 * se_mean
        z2 = (z - z.mean()) ** 2
        se_var = z2.std() / math.sqrt(n)
        assert abs(z.var() - m.variance) < 3 * se_var

    def test_exp_family_matches_poisson_to_first_order(self, poisson):
        # first-order in the predictor perturbation: nu ~ t and sd(alpha) ~ t,
        # so the moment difference must vanish faster than ||nu|| + sigma2_alpha
        p = make_provider(covariates=(0.8,))
        approx_fam = Family.exp_family(1.0)
        ratios = []
        for t in (0.2, 0.1, 0.05, 0.025):
            params = ConfoundingParams((0.3 * t,), 0.2 * t * t)
            exact = null_moments(p, poisson, params)
            approx = null_moments(p, approx_fam, params)
            diff = abs(exact.mean - approx.mean) + abs(exact.variance - approx.variance)
            ratios.append(diff / (0.3 * t + 0.2 * t * t))
        assert ratios == sorted(ratios, reverse=True)
        assert ratios[-1] < 0.25 * ratios[0]

    def test_degenerate_variance_names_provider(self):
        fam = Family.exp_family(1.0)
        p = make_provider("shaky", covariates=(-30.0,), effective_size=4.0, b3_sum=4.0)
        with pytest.raises(DegenerateVarianceError) as err:
            null_moments(p, fam, ConfoundingParams((1.0,), 0.0))
        assert err.value.provider_id == "shaky"

    def test_batch_matches_scalar(self, poisson):
        rng = np.random.default_rng(7)
        providers = [
            make_provider(f"p{i}", covariates=(float(rng.standard_normal()),))
            for i in range(8)
        ]
        params = ConfoundingParams((0.3,), 0.2)
        arrays = stack_providers(providers, poisson)
        means, variances = null_moments_many(arrays, poisson, params)
        for i, p in enumerate(providers):
            m = null_moments(p, poisson, params)
            assert means[i] == pytest.approx(m.mean, rel=1e-14)
            assert variances[i] == pytest.approx(m.variance, rel=1e-14)


class TestCorrectedZ:
    def test_identity_correction_at_null_params(self, poisson):
        p = make_provider(observed=117, covariates=(0.4,))
        params = ConfoundingParams((0.0,), 0.0)
        assert corrected_z(p, poisson, params) == pytest.approx(naive_z(p, poisson), abs=1e-14)

    def test_centered_case(self):
        # normal family: naive z 2.5, null mean 2.5, variance 11
        p = ProviderSummary("a", observed=125.0, expected=100.0, effective_size=100.0,
                            covariates=(1.0,), n_patients=100)
        fam = Family.normal(1.0)
        assert naive_z(p, fam) == pytest.approx(2.5)
        assert corrected_z(p, fam, ConfoundingParams((0.25,), 0.1)) == pytest.approx(0.0, abs=1e-12)

    def test_null_provider_normality_check(self, poisson):
        # 1e5 null draws at known parameters: corrected z has mean ~0, variance in [0.9, 1.1]
        nu, s2a, neff = 0.25, 0.1, 100.0
        rng = np.random.default_rng(88)
        n = 100_000
        w = rng.standard_normal(n)
        alpha = rng.standard_normal(n) * math.sqrt(s2a)
        obs = rng.poisson(neff * np.exp(nu * w + alpha)).astype(float)
        providers = [
            ProviderSummary(f"p{i}", obs[i], neff, neff, (float(w[i]),))
            for i in range(n)
        ]
        arrays = stack_providers(providers, poisson)
        cz = corrected_z_many(arrays, poisson, ConfoundingParams((nu,), s2a))
        assert abs(cz.mean()) < 3.0 * cz.std() / math.sqrt(n)
        assert 0.9 < cz.var() < 1.1
