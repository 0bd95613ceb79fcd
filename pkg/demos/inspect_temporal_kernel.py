"""
Looking inside a fitted model
=============================

After fitting, the model exposes three things worth plotting: the factor
curves at every period, the learned temporal covariance between periods, and
multi-step forecasts. This script prints compact summaries of each.
"""

# %%
import numpy as np

from df2m.data import SimConfig, simulate_panel
from df2m.mtgp import factor_trajectories, predict_path
from df2m.trainer import TrainConfig, fit, init_model

panel, truth = simulate_panel(SimConfig(p=10, n=24, L=10, M0=2, dynamic="two-lag"),
                              np.random.default_rng(2))
config = TrainConfig(encoder="gru", M=4, hidden_size=8, max_iters=300, seed=2)
model, _ = fit(init_model(panel, config), panel, config)

# %%
# Posterior-mean factor curves on the observation grid: n x M x L.
X = factor_trajectories(model)
print("factor trajectories:", X.shape)
print("per-factor RMS over time and grid:", np.round(np.sqrt(np.mean(X ** 2, axis=(0, 2))), 3))

# %%
# The temporal covariance comes from a kernel on GRU features of the factor
# history. Its correlations show which periods the model treats as similar.
S = model.sigma_x()
corr = S / np.sqrt(np.outer(np.diag(S), np.diag(S)))
lags = [np.mean(np.diag(corr, k)) for k in range(1, 6)]
print("mean correlation at lags 1-5:", np.round(lags, 3))

# %%
# Forecasts for the next three periods feed each predicted step back into
# the encoder history.
path = predict_path(model, horizon=3)
print("forecast path (H, p, L):", path.shape)
print("first variable, horizon 1:", np.round(path[0, 0], 3))
