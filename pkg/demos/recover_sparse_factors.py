"""
Recovering a sparse set of functional factors
=============================================

Simulate a panel of curves driven by three latent functional factors with
linear Markov dynamics, fit a DF2M model with room for eight factors, and
see how many factor columns the Indian-buffet posterior keeps switched on.
"""

# %%
# Simulate a panel: 20 variables observed at 40 periods on a 12-point grid.
import numpy as np

from df2m.data import SimConfig, simulate_panel

panel, truth = simulate_panel(SimConfig(p=20, n=40, L=12, M0=3), np.random.default_rng(0))
print("panel shape (n, p, L):", panel.shape)
print("true active factors per variable:", truth["Z"].sum(axis=1).astype(int))

# %%
# Fit with the linear encoder. ``M`` is only a truncation level; the
# stick-breaking prior decides how many columns are used.
from df2m.trainer import TrainConfig, fit, init_model

config = TrainConfig(encoder="lin", M=8, max_iters=1500, seed=0, lr_phase1=0.01, tol=1e-5)
model, trace = fit(init_model(panel, config), panel, config)
print(f"stopped after {len(trace)} iterations ({trace.stop_reason})")

# %%
# The ELBO, averaged over consecutive 20-iteration blocks, climbs steadily.
blocks = np.asarray(trace.elbo[:len(trace) // 20 * 20]).reshape(-1, 20).mean(axis=1)
for i in range(0, len(blocks), max(1, len(blocks) // 6)):
    print(f"iterations {20 * i:4d}-{20 * i + 19:4d}: mean ELBO {blocks[i]:12.1f}")

# %%
# A column counts as active when some variable loads on it with posterior
# inclusion probability above one half.
q = model.loading_posterior()
active = q.m.max(axis=0) > 0.5
print("max inclusion probability per column:", np.round(q.m.max(axis=0), 2))
print("expected stick weights E[w_r]:       ", np.round(q.expected_sticks(), 2))
print(f"active columns: {active.sum()} (truth: 3)")
