"""Sparse variational multi-task GP posterior over the latent factors.

Each factor ``r`` has inducing values ``X_tr(v)`` at ``K`` shared points
``v``, with ``q(X_tr(v)) = N(mu_tr, S_tr)`` independent over ``t`` and ``r``.
Values at observation points ``u`` follow from the prior conditional
``X(u) | X(v)``, whose mean is ``A X(v)`` with
``A = Sigma_uv Sigma_vv^{-1}``. Vectorized covariances use the ordering
``t * L + k`` (time major), matching ``kron(Sigma_X, .)``.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .kernels import SpatialKernel, cross_temporal, gram, temporal_gram
from .model import Df2mModel, InducingGrid, InducingPosterior

__all__ = [
    "InducingGrid", "InducingPosterior", "interp_matrix", "schur_complement",
    "posterior_mean_at", "posterior_cov_at", "sample_proxy", "prop3_constant",
    "predict_inducing", "predict_next", "predict_path", "factor_trajectories",
]


def _points(grid) -> np.ndarray:
    return grid.v if isinstance(grid, InducingGrid) else np.asarray(grid, dtype=float).ravel()


def interp_matrix(spatial: SpatialKernel, u, v) -> np.ndarray:
    """``A = Sigma_uv Sigma_vv^{-1}`` (L x K)."""
    Lvv, _ = ad.cholesky_factor(gram(spatial, v, v))
    return sla.cho_solve((Lvv, True), gram(spatial, v, u)).T


def schur_complement(spatial: SpatialKernel, u, v) -> np.ndarray:
    """``Sigma_uu - Sigma_uv Sigma_vv^{-1} Sigma_vu``, symmetrized."""
    A = interp_matrix(spatial, u, v)
    C = gram(spatial, u, u) - A @ gram(spatial, v, u)
    return 0.5 * (C + C.T)


def _check_index(q: InducingPosterior, t: int, r: int):
    n, M = q.mu.shape[:2]
    if not (0 <= t < n and 0 <= r < M):
        raise IndexError(f"(t, r) = ({t}, {r}) outside n={n}, M={M}")


def posterior_mean_at(q: InducingPosterior, grid, u, spatial: SpatialKernel, t: int, r: int):
    """Posterior mean of ``X_tr(u)``; depends on ``mu_tr`` only."""
    _check_index(q, t, r)
    return interp_matrix(spatial, u, _points(grid)) @ q.mu[t, r]


def posterior_cov_at(q: InducingPosterior, grid, u, spatial: SpatialKernel, sigma_x, r: int):
    """Covariance of ``vec X_r(u)`` (nL x nL) as ``(total, part1, part2)``.

    ``part1`` carries the inducing uncertainty ``A S_tr A^T`` block-diagonally,
    ``part2 = Sigma_X kron (Sigma_uu - A Sigma_vu)`` the conditional spread.
    """
    u = np.asarray(u, dtype=float).ravel()
    v = _points(grid)
    n = q.mu.shape[0]
    L = u.size
    if n * L > 256:
        raise ValueError("posterior_cov_at is meant for test-scale problems (nL <= 256)")
    A = interp_matrix(spatial, u, v)
    S = q.S[:, r]
    part1 = np.zeros((n * L, n * L))
    for t in range(n):
        part1[t * L:(t + 1) * L, t * L:(t + 1) * L] = A @ S[t] @ A.T
    part2 = np.kron(np.asarray(sigma_x, dtype=float), schur_complement(spatial, u, v))
    return part1 + part2, part1, part2


def sample_proxy(q: InducingPosterior, grid, u, spatial: SpatialKernel,
                 rng: np.random.Generator, t: int, r: int) -> np.ndarray:
    """One draw of the inducing-driven component ``A (mu_tr + L_tr eps)``."""
    _check_index(q, t, r)
    A = interp_matrix(spatial, u, _points(grid))
    eps = rng.standard_normal(q.mu.shape[2])
    return A @ (q.mu[t, r] + q.S_chol[t, r] @ eps)


def prop3_constant(beta_f2: float, sigma_eps: float, sigma_x, sigma_uu, sigma_uv, sigma_vv) -> float:
    """Expected squared-residual inflation from the conditional component.

    ``beta_f2`` is ``E ||Z * A||_F^2``. The value is subtracted from the ELBO.
    """
    if sigma_eps <= 0:
        raise ValueError("sigma_eps must be positive")
    Lvv, _ = ad.cholesky_factor(np.asarray(sigma_vv, dtype=float))
    sigma_uv = np.asarray(sigma_uv, dtype=float)
    schur = np.asarray(sigma_uu, dtype=float) - sigma_uv @ sla.cho_solve((Lvv, True), sigma_uv.T)
    return float(0.5 / sigma_eps ** 2 * beta_f2 * np.trace(sigma_x) * np.trace(schur))


# ---------------------------------------------------------------- prediction


def predict_inducing(model: Df2mModel, horizon: int = 1) -> np.ndarray:
    """Predicted inducing means for steps ``n+1 .. n+horizon`` (horizon x M x K).

    Each step conditions the temporal GP on the inducing means so far; the
    prediction is then appended to the history and the step repeated.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    means = model.inducing_means()  # n x M x K
    out = []
    for _ in range(horizon):
        N = means.shape[0]
        flat = means.reshape(N, -1)
        history = np.vstack([np.zeros((1, flat.shape[1])), flat])  # N + 1 rows
        h = model.features(history)
        Kxx = temporal_gram(h[:N], model.temporal) + model.temporal.nugget * np.eye(N)
        Lx, _ = ad.cholesky_factor(Kxx)
        k_star = cross_temporal(h[N:], h[:N], model.temporal)  # 1 x N
        weights = sla.cho_solve((Lx, True), k_star.T).ravel()  # Sigma_X^{-1} k_*
        nxt = np.einsum("t,tmk->mk", weights, means)
        out.append(nxt)
        means = np.concatenate([means, nxt[None]], axis=0)
    return np.stack(out)


def _check_trained(model: Df2mModel, allow_untrained: bool):
    if not allow_untrained and not model.meta.get("trained", False):
        raise RuntimeError("model has not been trained; fit it first")


def _offset_at(model: Df2mModel, u) -> np.ndarray:
    if u.shape == model.grid.shape and np.array_equal(u, model.grid):
        return model.offset
    return np.stack([np.interp(u, model.grid, row) for row in model.offset])


def predict_path(model: Df2mModel, u=None, horizon: int = 1, allow_untrained: bool = False):
    """Forecast curves for steps ``n+1 .. n+horizon`` (horizon x p x L)."""
    _check_trained(model, allow_untrained)
    u = model.grid if u is None else np.asarray(u, dtype=float).ravel()
    A = interp_matrix(model.spatial, u, model.inducing)
    E1 = model.loading_posterior().m * model.loading_posterior().eta
    mus = predict_inducing(model, horizon)  # h x M x K
    X = np.einsum("hmk,lk->hml", mus, A)  # h x M x L
    return np.einsum("pm,hml->hpl", E1, X) + _offset_at(model, u)[None]


def predict_next(model: Df2mModel, u=None, horizon: int = 1, allow_untrained: bool = False):
    """Forecast ``Y_{n+horizon}(u)`` (p x L)."""
    return predict_path(model, u, horizon, allow_untrained)[-1]


def factor_trajectories(model: Df2mModel, u=None) -> np.ndarray:
    """Posterior mean factor curves on ``u`` (n x M x L)."""
    u = model.grid if u is None else np.asarray(u, dtype=float).ravel()
    A = interp_matrix(model.spatial, u, model.inducing)
    return np.einsum("tmk,lk->tml", model.inducing_means(), A)
