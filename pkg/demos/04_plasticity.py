"""
Refining an order from retrieval feedback
=========================================

On a planted trace every source token sits at a fixed lag from its query,
so the retrieval loss, seen as a function of one shared order, has an
interior minimum. Projected gradient descent with step 1/L moves toward it
and the loss never increases along the way. The curvature near alpha = 1
is large, so 1/L is a cautious step and progress is slow but steady.
"""

from __future__ import annotations

import numpy as np

from vort.plasticity import (
    PlasticityConfig,
    SoeFamily,
    estimate_smoothness,
    make_planted_trace,
    plasticity_descent,
    shared_order_objective,
)

trace = make_planted_trace(n=256, d_k=16, n_queries=48, seed=0)
F = shared_order_objective(trace, SoeFamily(256, 1e-3, 15))

# %%
# The loss profile over the order.
for a in np.linspace(0.1, 1.0, 10):
    print(f"alpha={a:.1f}  loss={F(a)[0]:9.3f}")

# %%
# Descent from a high starting order.
L_hat = estimate_smoothness(F, 0.1, 1.0)
hist = plasticity_descent(F, 0.9, PlasticityConfig(eta=1.0 / L_hat, iterations=400, delta=0.1, L_hat=L_hat))
alphas, values, grads = hist.as_arrays()
print(f"estimated smoothness L = {L_hat:.3g}")
for l in range(0, len(alphas), 50):
    print(f"step {l:3d}  alpha={alphas[l]:.4f}  loss={values[l]:.3f}  |grad|={grads[l]:.3f}")
print("loss nonincreasing:", bool(np.all(np.diff(values) <= 1e-10 * values[0])))
