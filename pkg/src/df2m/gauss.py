"""Gaussian and Kronecker-structured linear algebra.

The prior over a factor's inducing values is ``N(0, Sigma_X kron Sigma_vv)``;
everything here works with the two small factors and never forms the
Kronecker product. The dense ``*_oracle`` functions do, and exist for tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class MatrixNormal:
    mean: np.ndarray  # L x n
    row_cov: np.ndarray  # L x L
    col_cov: np.ndarray  # n x n


@dataclass
class KroneckerGaussian:
    temporal: np.ndarray  # n x n
    spatial: np.ndarray  # K x K


def psd_factor(A: np.ndarray) -> np.ndarray:
    """A matrix ``F`` with ``F F^T = A`` for symmetric PSD ``A``.

    Cholesky when ``A`` is positive definite, otherwise a symmetric square
    root from the eigendecomposition (so singular covariances such as 0 work).
    """
    A = 0.5 * (A + A.T)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(A)
    scale = max(float(np.abs(w).max()), 1.0)
    if w.min() < -1e-8 * scale:
        raise ad.CholeskyError(ad._failing_minor(A), "covariance is not PSD")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def sample_matrix_normal(dist: MatrixNormal, rng: np.random.Generator) -> np.ndarray:
    """One draw ``M0 + chol(U) E chol(V)^T`` with ``E`` standard normal."""
    L, n = dist.mean.shape
    E = rng.standard_normal((L, n))
    return dist.mean + psd_factor(dist.row_cov) @ E @ psd_factor(dist.col_cov).T


# ------------------------------------------------------------------ KL terms


def diag_mask(K: int, blocks: int) -> np.ndarray:
    return np.tile(np.eye(K), (1, blocks))


def kl_inducing_nodes(mu, chol_blocks, Lx, Lvv, M: int) -> ad.Node:
    """Sum over factors of KL[q(X_r(v)) || N(0, Sigma_X kron Sigma_vv)].

    ``mu`` is (M*n) x K with row ``r*n + t`` holding ``mu_tr``;
    ``chol_blocks`` is K x (M*n*K), block ``r*n + t`` being the lower
    Cholesky factor of ``S_tr``; ``Lx`` and ``Lvv`` are Cholesky factors of
    the temporal and spatial prior covariances.
    """
    n = Lx.shape[0]
    K = Lvv.shape[0]
    # sum_t (Sigma_X^-1)_tt tr(Sigma_vv^-1 S_tr), per factor
    W = ad.solve_triangular(Lvv, chol_blocks)
    tr_s = ad.reshape(ad.sum_(ad.square(W), axis=0), (M * n, K))
    tr_s = ad.reshape(ad.sum_(tr_s, axis=1), (M, n))
    Lx_inv = ad.solve_triangular(Lx, np.eye(n))
    prec_diag = ad.sum_(ad.square(Lx_inv), axis=0)  # 1 x n
    trace_term = ad.sum_(tr_s * prec_diag)

    # tr(mu_r^T Sigma_vv^-1 mu_r Sigma_X^-1), mu_r is n x K here
    P = ad.permute(mu, (M, n, K), (1, 0, 2), (n, M * K))
    C = ad.reshape(ad.solve_triangular(Lx, P), (n * M, K))
    D = ad.solve_triangular(Lvv, ad.transpose(C))
    mean_term = ad.sum_(ad.square(D))

    logdet_x = 2.0 * ad.sum_(ad.log(ad.diag(Lx)))
    logdet_v = 2.0 * ad.sum_(ad.log(ad.diag(Lvv)))
    s_diag = ad.sum_(chol_blocks * diag_mask(K, M * n), axis=0)
    logdet_s = 2.0 * ad.sum_(ad.log(s_diag))

    total = (trace_term + mean_term + (M * K) * logdet_x + (M * n) * logdet_v
             - logdet_s - float(M * n * K))
    return 0.5 * total


def kl_inducing(mu: np.ndarray, S: np.ndarray, prior: KroneckerGaussian) -> float:
    """KL for one factor: ``mu`` is n x K, ``S`` is n x K x K."""
    mu = np.asarray(mu, dtype=float)
    S = np.asarray(S, dtype=float)
    n, K = mu.shape
    tape = ad.Tape()
    blocks = np.concatenate([ad.cholesky_factor(S[t])[0] for t in range(n)], axis=1)
    Lx = ad.cholesky(tape.constant(prior.temporal))
    Lvv = ad.cholesky(tape.constant(prior.spatial))
    out = kl_inducing_nodes(tape.constant(mu), tape.constant(blocks), Lx, Lvv, M=1)
    return float(out.value[0, 0])


def kronecker_trace_identity(sigma_x, sigma_vv, S):
    """Both sides of tr((Sigma_X^-1 kron Sigma_vv^-1) blockdiag(S)) for checking.

    Returns ``(dense, structured)``; the dense side materializes the product.
    """
    n = sigma_x.shape[0]
    K = sigma_vv.shape[0]
    Px = np.linalg.inv(sigma_x)
    Pv = np.linalg.inv(sigma_vv)
    big = np.zeros((n * K, n * K))
    for t in range(n):
        big[t * K:(t + 1) * K, t * K:(t + 1) * K] = S[t]
    dense = np.trace(np.kron(Px, Pv) @ big)
    structured = sum(Px[t, t] * np.trace(Pv @ S[t]) for t in range(n))
    return dense, structured


# ------------------------------------------------------------------- oracles


def kl_mvn_oracle(mean0, cov0, mean1, cov1) -> float:
    """Dense KL[N(mean0, cov0) || N(mean1, cov1)]."""
    mean0 = np.atleast_1d(np.asarray(mean0, dtype=float)).ravel()
    mean1 = np.atleast_1d(np.asarray(mean1, dtype=float)).ravel()
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    k = mean0.size
    if cov1.shape != (k, k) or cov0.shape != (k, k) or mean1.size != k:
        raise ValueError("dimension mismatch")
    s1, ld1 = np.linalg.slogdet(cov1)
    if s1 <= 0:
        raise np.linalg.LinAlgError("cov1 is singular")
    s0, ld0 = np.linalg.slogdet(cov0)
    inv1 = np.linalg.inv(cov1)
    d = mean1 - mean0
    return 0.5 * (np.trace(inv1 @ cov0) - k + d @ inv1 @ d + ld1 - ld0)


def conditional_gaussian_oracle(mean, cov, observed, values):
    """Condition a dense joint Gaussian on ``x[observed] = values``.

    Returns the full-length mean and covariance; observed coordinates take
    their observed values and zero variance.
    """
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    obs = np.asarray(observed, dtype=int)
    values = np.asarray(values, dtype=float).ravel()
    free = np.setdiff1d(np.arange(mean.size), obs)
    C_oo = cov[np.ix_(obs, obs)]
    if obs.size and np.linalg.matrix_rank(C_oo) < obs.size:
        raise np.linalg.LinAlgError("observed block is singular")
    out_mean = mean.copy()
    out_cov = np.zeros_like(cov)
    out_mean[obs] = values
    if free.size:
        C_fo = cov[np.ix_(free, obs)]
        gain = np.linalg.solve(C_oo, C_fo.T).T if obs.size else np.zeros((free.size, 0))
        out_mean[free] = mean[free] + gain @ (values - mean[obs])
        out_cov[np.ix_(free, free)] = cov[np.ix_(free, free)] - gain @ C_fo.T
    return out_mean, out_cov
