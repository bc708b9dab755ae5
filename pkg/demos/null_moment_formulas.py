"""How far do naive z-scores drift when confounding is in play?

The exact null mean/variance formulas say a provider with covariate W and
latent variance sigma2_alpha has z-scores centered at
sqrt(neff)*(exp(W'nu + s2a/2) - 1) with variance far above one.  This
script checks the closed forms against brute-force simulation from the
count model, then prints the drift across a covariate range.
"""

import math

import numpy as np

from empnull import ConfoundingParams, Family, ProviderSummary, null_moments

NEFF = 100.0
NU = 0.25
S2A = 0.1

family = Family.poisson()
params = ConfoundingParams((NU,), S2A)
rng = np.random.default_rng(20240817)

print(f"Poisson provider, effective size {NEFF:.0f}, nu={NU}, sigma2_alpha={S2A}")
print()
print(f"{'W':>5} {'mean (formula)':>15} {'mean (sim)':>12} {'var (formula)':>14} {'var (sim)':>11}")
n_sim = 400_000
for w in (-1.0, -0.5, 0.0, 0.5, 1.0):
    provider = ProviderSummary("demo", NEFF, NEFF, NEFF, (w,))
    m = null_moments(provider, family, params)
    alpha = rng.standard_normal(n_sim) * math.sqrt(S2A)
    obs = rng.poisson(NEFF * np.exp(NU * w + alpha))
    z = (obs - NEFF) / math.sqrt(NEFF)
    print(f"{w:>5.1f} {m.mean:>15.4f} {z.mean():>12.4f} {m.variance:>14.4f} {z.var():>11.4f}")

print()
print("A one-unit covariate advantage shifts the 'null' z-score by more than")
print("two (not zero!), and the latent effect inflates the variance roughly")
print(f"{1 + S2A * NEFF:.0f}-fold -- naive +-1.96 cutoffs are meaningless here.")
