"""
Why a fixed mixture of exponentials cannot stand in for a power law
===================================================================

Any finite mixture of decaying exponentials has an L2 distance to
``t^(alpha-1)`` over ``[1, T]`` that grows without bound in T when
``alpha > 1/2``. Quantising orders to a grid of K banks costs an error
that shrinks like 1/K.
"""

from __future__ import annotations

from vort.harness import fit_mixture_to_powerlaw
from vort.theory_checks import (
    divergence_check,
    n_alpha,
    quantisation_grid_error,
    quantisation_sweep,
    separation_sweep,
)

# %%
# The lower bound holds for every random mixture on the grid of orders and horizons.
results = separation_sweep(200)
print(f"{sum(r.passed for r in results)} of {len(results)} separation checks hold")

# %%
# Fit five exponentials to t^(-0.3) on [1, 1000], then stretch the horizon.
fit = fit_mixture_to_powerlaw(0.7, 1000, 5, target="raw")
div = divergence_check(fit.mixture, 0.7)
for T, err in zip(div.params["T"], div.params["errors"]):
    print(f"T={T:8.0f}  L2 error={err:10.3f}  target energy={n_alpha(0.7, T):10.1f}")

# %%
# Order quantisation: the bound holds on the whole grid, and doubling K halves the error.
sweep = quantisation_sweep(0.1, 20, 10)
print(f"{sum(r.passed for r in sweep)} of {len(sweep)} quantisation checks hold")
for K in (4, 8, 16, 32):
    print(f"K={K:2d}  sup error at t=1000: {quantisation_grid_error(0.1, K, 1e3):.4f}")
