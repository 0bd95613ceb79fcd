"""Variational Indian buffet process loadings.

Rows of ``Z`` and ``A`` index observed variables (``p`` of them), columns
index factors up to the truncation ``M``. The variational family is

* ``q(v_j) = Beta(tau1_j, tau0_j)`` for the stick fractions,
* ``q(Z_ir) = Bernoulli(m_ir)``,
* ``q(A_ir) = Normal(eta_ir, sigma_q_ir^2)``,

against the prior ``v_j ~ Beta(alpha, 1)``, ``w_r = prod_{j<=r} v_j``,
``Z_ir | w ~ Bernoulli(w_r)`` and ``A_ir ~ Normal(0, sigma_a^2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad

W_CLIP = 1.0 - 1e-12


@dataclass
class LoadingPosterior:
    tau1: np.ndarray  # (M,)
    tau0: np.ndarray  # (M,)
    m: np.ndarray  # (p, M)
    eta: np.ndarray  # (p, M)
    sigma_q: np.ndarray  # (p, M)
    alpha: float = 1.0
    sigma_a: float = 1.0

    def __post_init__(self):
        self.tau1 = np.asarray(self.tau1, dtype=float).ravel()
        self.tau0 = np.asarray(self.tau0, dtype=float).ravel()
        self.m = np.atleast_2d(np.asarray(self.m, dtype=float))
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        self.sigma_q = np.atleast_2d(np.asarray(self.sigma_q, dtype=float))
        M = self.tau1.size
        if self.tau0.size != M or any(a.shape[1] != M for a in (self.m, self.eta, self.sigma_q)):
            raise ValueError("truncation level differs between parameters")
        if np.any(self.tau1 <= 0) or np.any(self.tau0 <= 0):
            raise ValueError("Beta parameters must be positive")
        if np.any(self.m < 0) or np.any(self.m > 1):
            raise ValueError("Bernoulli means must lie in [0, 1]")
        if np.any(self.sigma_q < 0) or self.alpha <= 0 or self.sigma_a <= 0:
            raise ValueError("scales and alpha must be positive")

    @property
    def M(self) -> int:
        return self.tau1.size

    def expected_sticks(self) -> np.ndarray:
        """E[w_r] = prod_j E[v_j] under the mean-field posterior."""
        return np.cumprod(self.tau1 / (self.tau1 + self.tau0))


def stick_weights(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0) or np.any(v > 1):
        raise ValueError("stick fractions must lie in (0, 1]")
    return np.cumprod(v)


def _upper_ones(M):
    return np.triu(np.ones((M, M)))


def kl_beta_nodes(tau1, tau0, alpha: float) -> ad.Node:
    """sum_j KL[Beta(tau1_j, tau0_j) || Beta(alpha, 1)]."""
    a, b = tau1, tau0
    out = (ad.gammaln(a + b) - ad.gammaln(a) - ad.gammaln(b) - np.log(alpha)
           + (a - alpha) * ad.digamma(a) + (b - 1.0) * ad.digamma(b)
           + (alpha + 1.0 - a - b) * ad.digamma(a + b))
    return ad.sum_(out)


def _xlogx(x):
    return x * ad.log(ad.clip(x, 1e-300))


def expected_log_sticks(tau1, tau0, u):
    """(E[log w_r], Monte Carlo draws of log(1 - w_r)) as nodes.

    ``u`` holds S x M uniforms that are pushed through the Beta inverse CDF.
    """
    M = tau1.shape[1]
    tri = _upper_ones(M)
    e_log_v = ad.digamma(tau1) - ad.digamma(tau1 + tau0)
    e_log_w = e_log_v @ tri
    v = ad.beta_icdf(tau1, tau0, u)
    w = ad.exp(ad.log(v) @ tri)
    log1m_w = ad.log1p(-ad.clip(w, 0.0, W_CLIP))
    return e_log_w, log1m_w


def kl_bernoulli_nodes(m, e_log_w, e_log1m_w) -> ad.Node:
    """sum_ir E_q KL[Bernoulli(m_ir) || Bernoulli(w_r)] given the two log-moments."""
    ent = _xlogx(m) + _xlogx(1.0 - m)
    cross = m * e_log_w + (1.0 - m) * e_log1m_w
    return ad.sum_(ent - cross)


def kl_ibp_nodes(tau1, tau0, m, alpha: float, u, per_draw: bool = False):
    """Beta + Bernoulli KL terms.

    With ``per_draw`` the Bernoulli part for each Monte Carlo draw is returned
    as well, for standard errors.
    """
    e_log_w, log1m_w = expected_log_sticks(tau1, tau0, u)
    e_log1m = ad.mean(log1m_w, axis=0)
    total = kl_beta_nodes(tau1, tau0, alpha) + kl_bernoulli_nodes(m, e_log_w, e_log1m)
    if not per_draw:
        return total
    draws = [kl_bernoulli_nodes(m, e_log_w, log1m_w[s]) for s in range(log1m_w.shape[0])]
    return total, draws


def kl_ibp(q: LoadingPosterior, rng: np.random.Generator, draws: int = 16):
    """KL[q(Z) || p(Z | alpha)] with its Monte Carlo standard error."""
    tape = ad.Tape()
    u = rng.uniform(size=(draws, q.M))
    total, per_draw = kl_ibp_nodes(tape.constant(q.tau1[None, :]), tape.constant(q.tau0[None, :]),
                                   tape.constant(q.m), q.alpha, u, per_draw=True)
    vals = np.array([float(x.value[0, 0]) for x in per_draw])
    stderr = float(vals.std(ddof=1) / np.sqrt(draws)) if draws > 1 else float("nan")
    return float(total.value[0, 0]), stderr


def kl_beta(tau1, tau0, alpha: float) -> float:
    tape = ad.Tape()
    a = tape.constant(np.atleast_2d(tau1))
    b = tape.constant(np.atleast_2d(tau0))
    return float(kl_beta_nodes(a, b, alpha).value[0, 0])


def kl_bernoulli(m, w) -> np.ndarray:
    """Elementwise KL[Bernoulli(m) || Bernoulli(w)] for fixed ``w``."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    return special.xlogy(m, m) - special.xlogy(m, w) + special.xlogy(1 - m, 1 - m) - special.xlogy(1 - m, 1 - w)


def kl_loadings_nodes(eta, sigma_q, sigma_a) -> ad.Node:
    var_q = ad.square(sigma_q)
    var_a = ad.square(sigma_a)
    out = (ad.square(eta) + var_q) / var_a - 1.0 + ad.log(var_a) - ad.log(var_q)
    return 0.5 * ad.sum_(out)


def kl_loadings(q: LoadingPosterior) -> float:
    if np.any(q.sigma_q <= 0):
        raise ValueError("variational scales must be positive")
    tape = ad.Tape()
    out = kl_loadings_nodes(tape.constant(q.eta), tape.constant(q.sigma_q),
                            tape.constant(q.sigma_a))
    return float(out.value[0, 0])


def beta_moments(q: LoadingPosterior):
    """First and second moments of beta_ir = Z_ir * A_ir."""
    E1 = q.m * q.eta
    E2 = q.m * (q.eta ** 2 + q.sigma_q ** 2)
    return E1, E2


def beta_moments_nodes(m, eta, sigma_q):
    return m * eta, m * (ad.square(eta) + ad.square(sigma_q))
