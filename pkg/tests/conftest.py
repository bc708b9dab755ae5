import numpy as np
import pytest

from empnull import Family, ProviderSummary


@pytest.fixture
def poisson():
    return Family.poisson()


def make_provider(pid="p1", observed=100.0, expected=100.0, effective_size=100.0,
                  covariates=(0.0,), n_patients=100, b3_sum=None):
    if b3_sum is None:
        b3_sum = effective_size
    return ProviderSummary(
        id=pid, observed=observed, expected=expected, effective_size=effective_size,
        covariates=covariates, n_patients=n_patients, b3_sum=b3_sum,
    )


def poisson_null_dataset(rng, n=50, nu=0.25, sigma2_alpha=0.1, neff=100.0):
    """Null providers drawn straight from the count model (no outliers)."""
    w = rng.standard_normal(n)
    alpha = rng.standard_normal(n) * np.sqrt(sigma2_alpha)
    rate = neff * np.exp(nu * w + alpha)
    obs = rng.poisson(rate).astype(float)
    return [
        make_provider(f"p{i}", obs[i], neff, neff, (float(w[i]),))
        for i in range(n)
    ]
