"""
Power-law retention kernel and its exponential-sum approximation
================================================================

Fractional weights ``w_j(alpha)`` decay like ``j^(alpha-1)``: small orders
forget quickly, orders near 1 approach a running sum. A short sum of
geometric terms reproduces them to a certified error over a finite horizon,
which is what makes a constant-size recurrent state possible.
"""

from __future__ import annotations

import numpy as np

from vort.gl_kernel import gl_partial_sum, gl_weights
from vort.soe import build_soe, soe_weight

# %%
# Exact weights for a few orders. The first weight is always 1.
lags = np.array([0, 1, 10, 100, 1000])
for alpha in (0.3, 0.5, 0.7, 0.9):
    w = gl_weights(alpha, 1000).values
    print(f"alpha={alpha}: " + "  ".join(f"w_{j}={w[j]:.4f}" for j in lags))

# %%
# Total mass after t steps grows like t^alpha, so no order below 1 is a plain sum.
for alpha in (0.3, 0.9):
    print(f"alpha={alpha}: sum of first 10^4 weights = {gl_partial_sum(alpha, 10_000):.1f}")

# %%
# Build a certified approximation: the smallest number of terms whose
# maximum error over lags 0..T stays below the target.
approx = build_soe(0.5, horizon=1000, target_eps=4e-3)
print(f"terms S={approx.S}, certified error={approx.certified_error:.2e}")
print("rates  :", np.round(approx.rates[:5], 5), "...")
print("coeffs :", np.round(approx.coeffs[:5], 5), "...")

exact = gl_weights(0.5, 1000).values
fit = soe_weight(approx, np.arange(1001))
print(f"max |fit - exact| over lags 0..1000 = {np.max(np.abs(fit - exact)):.2e}")

# %%
# More terms buy accuracy until the truncated density tail sets a floor.
for S in (5, 10, 15, 20, 30):
    err = build_soe(0.5, 1000, 4e-3, n_terms=S).certified_error
    print(f"S={S:2d}  max error={err:.2e}")
