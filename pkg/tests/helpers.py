"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np
from scipy import special

from df2m import autodiff as ad
from df2m.gauss import KroneckerGaussian, kl_mvn_oracle
from df2m.ibp import kl_beta
from df2m.kernels import gram
from df2m.model import InducingPosterior


def numeric_grad(f, params: dict, eps: float = 1e-6) -> dict:
    """Central finite differences of scalar ``f(params)`` for every entry."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v, dtype=float)
        for idx in np.ndindex(v.shape):
            step = eps * max(1.0, abs(v[idx]))
            plus = {**params, k: v.copy()}
            minus = {**params, k: v.copy()}
            plus[k][idx] += step
            minus[k][idx] -= step
            g[idx] = (f(plus) - f(minus)) / (2 * step)
        out[k] = g
    return out


def assert_grads_close(analytic: dict, numeric: dict, rtol: float, atol: float = 1e-8):
    """Entrywise ``|a - n| <= max(rtol * max(|a|, |n|), atol)``.

    The absolute floor covers entries whose size is comparable to the
    finite-difference round-off (about 1e-16 * |f| / step).
    """
    for k in numeric:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        assert a.shape == n.shape, f"{k}: shape {a.shape} vs {n.shape}"
        scale = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        bad = err > np.maximum(rtol * scale, atol)
        if bad.any():
            i = np.unravel_index(np.argmax(np.where(bad, err / np.maximum(scale, 1e-300), 0)), a.shape)
            raise AssertionError(f"{k}{i}: analytic {a[i]!r} vs numeric {n[i]!r}")


def check_tape_grad(build, params: dict, rtol: float = 1e-5, eps: float = 1e-6):
    """``build(tape, nodes) -> 1x1 node``; compare tape gradient with FD."""
    value, grads = ad.value_and_grad(build, params)

    def f(p):
        tape = ad.Tape()
        return float(build(tape, {k: tape.variable(v) for k, v in p.items()}).value[0, 0])

    assert np.isfinite(value)
    assert_grads_close(grads, numeric_grad(f, params, eps), rtol)
    return value, grads


def expected_log1m_w_series(tau1, tau0, r, terms=20000):
    """E log(1 - w_r) = -sum_k E[w_r^k]/k with E[w_r^k] = prod_j B(a_j+k, b_j)/B(a_j, b_j)."""
    k = np.arange(1, terms + 1)
    log_mom = sum(special.betaln(tau1[j] + k, tau0[j]) - special.betaln(tau1[j], tau0[j])
                  for j in range(r + 1))
    return -np.sum(np.exp(log_mom) / k)


def kl_ibp_oracle(q):
    e_log_w = np.cumsum(special.digamma(q.tau1) - special.digamma(q.tau1 + q.tau0))
    e_log1m = np.array([expected_log1m_w_series(q.tau1, q.tau0, r) for r in range(q.M)])
    ent = special.xlogy(q.m, q.m) + special.xlogy(1 - q.m, 1 - q.m)
    return kl_beta(q.tau1, q.tau0, q.alpha) + np.sum(ent - q.m * e_log_w - (1 - q.m) * e_log1m)


def micro_instance(seed: int = 0, n: int = 3, p: int = 2, M: int = 2, K: int = 2, L: int = 3,
                   encoder: str = "lstm"):
    """A tiny model with randomized variational parameters, plus its data and frozen noise."""
    from df2m.data import SimConfig, simulate_panel
    from df2m.trainer import TrainConfig, draw_noise, init_model

    rng = np.random.default_rng(seed)
    panel, _ = simulate_panel(SimConfig(p=p, n=n, L=L, M0=1), rng)
    config = TrainConfig(encoder=encoder, M=M, K=K, hidden_size=3, seed=seed, stick_draws=4)
    model = init_model(panel, config)
    for k, v in model.variational.items():
        model.variational[k] = v + 0.3 * rng.standard_normal(v.shape)
    noise = draw_noise(model, rng, config)
    return model, panel, config, noise


def elbo_fd_grads(model, values, noise, group: str, eps: float = 1e-4):
    """Tape gradient of the ELBO for one parameter group and its central differences.

    The ELBO is O(1e3) on the micro instance, so the default step is 1e-4: at
    1e-6 the difference quotient is dominated by round-off.
    """
    from df2m.trainer import elbo_and_grads, elbo_terms

    history = model.history()
    _, _, grads = elbo_and_grads(model, values, noise, history, group)
    attr = "variational" if group == "variational" else "encoder_params"
    base = getattr(model, attr)

    def f(params):
        saved = getattr(model, attr)
        setattr(model, attr, params)
        try:
            return float(elbo_terms(model, values, noise, history, trainable=())[0].value[0, 0])
        finally:
            setattr(model, attr, saved)

    return grads, numeric_grad(f, dict(base), eps)


def elbo_fd_check(model, values, noise, group: str, rtol: float = 1e-4, eps: float = 1e-4):
    assert_grads_close(*elbo_fd_grads(model, values, noise, group, eps), rtol)


def grad_error_ratio(analytic: dict, numeric: dict, rtol: float, atol: float = 1e-8) -> float:
    """Largest ``|a - n| / max(rtol * max(|a|, |n|), atol)``; <= 1 means every entry passes."""
    worst = 0.0
    for k in numeric:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        allowed = np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), atol)
        worst = max(worst, float(np.max(np.abs(a - n) / allowed)))
    return worst


# ------------------------------------------------ dense Gaussian oracles

def random_spd(rng, k, ridge=0.3):
    B = rng.standard_normal((k, k))
    return B @ B.T / k + ridge * np.eye(k)


def random_instance(rng, n, K):
    mu = rng.standard_normal((n, K))
    S = np.stack([random_spd(rng, K, 0.1) for _ in range(n)])
    prior = KroneckerGaussian(random_spd(rng, n), random_spd(rng, K))
    return mu, S, prior


def dense_kl(mu, S, prior):
    n, K = mu.shape
    cov0 = np.zeros((n * K, n * K))
    for t in range(n):
        cov0[t * K:(t + 1) * K, t * K:(t + 1) * K] = S[t]
    return kl_mvn_oracle(mu.ravel(), cov0, np.zeros(n * K), np.kron(prior.temporal, prior.spatial))


def random_posterior(rng, n, M, K, zero_cov=False):
    mu = rng.standard_normal((n, M, K))
    chol = np.tril(rng.standard_normal((n, M, K, K)), -1) * 0.3
    chol += np.einsum("tmk,kj->tmkj", rng.uniform(0.2, 0.8, (n, M, K)), np.eye(K))
    return InducingPosterior(mu, np.zeros_like(chol) if zero_cov else chol)


def dense_joint(sigma_x, spatial, u, v):
    """Prior covariance of [vec X(v); vec X(u)] (time-major blocks) for one factor."""
    C = np.block([[gram(spatial, v, v), gram(spatial, v, u)],
                  [gram(spatial, u, v), gram(spatial, u, u)]])
    n, K, L = sigma_x.shape[0], len(v), len(u)
    full = np.kron(sigma_x, C)  # ordering: t, then (v points, u points)
    idx_v = np.concatenate([t * (K + L) + np.arange(K) for t in range(n)])
    idx_u = np.concatenate([t * (K + L) + K + np.arange(L) for t in range(n)])
    order = np.concatenate([idx_v, idx_u])
    return full[np.ix_(order, order)]
