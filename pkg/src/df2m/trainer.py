"""ELBO assembly and the alternating two-phase optimizer.

Phase 1 moves the variational parameters with the encoder frozen (so the
temporal covariance is a constant input); phase 2 moves the encoder weights
with the variational parameters frozen. Both ascend a single-draw
reparameterized ELBO estimate.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import FunctionalPanel
from .gauss import kl_inducing_nodes
from .ibp import beta_moments_nodes, kl_ibp_nodes, kl_loadings_nodes
from .kernels import TemporalKernel, kernel_nodes, temporal_gram
from .model import (Df2mModel, chol_masks, param_nodes, rng_stream, softplus_inv)
from .seqnets import ENCODERS, EncoderConfig, encode, init_encoder, normalize_weights

logger = logging.getLogger(__name__)

TERMS = ("likelihood", "kl_inducing", "kl_ibp", "kl_loadings", "prop3_constant")


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, trace: "ElboTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    encoder: str = "lstm"
    M: int = 8
    K: int = 10
    hidden_size: int = 15
    heads: int = 1
    alpha: float = 1.0
    spatial_kind: str = "se"
    nugget: float = 1e-2
    normalize: bool = False
    lr_phase1: float = 1e-2
    lr_phase2: float = 1e-3
    phase1_steps: int = 1
    phase2_steps: int = 1
    max_iters: int = 500
    refit_iters: int | None = None
    window: int = 20
    tol: float = 1e-3
    factor_draws: int = 1
    stick_draws: int = 16
    center: bool = True
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.encoder not in ENCODERS:
            errors.append(f"encoder: unknown kind {self.encoder!r}, expected one of {ENCODERS}")
        if self.spatial_kind not in ("se", "ou"):
            errors.append(f"spatial_kind: unknown kind {self.spatial_kind!r}")
        for name in ("M", "hidden_size", "heads", "factor_draws", "stick_draws",
                     "phase1_steps", "phase2_steps"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name}: must be >= 1")
        if self.K < 2:
            errors.append("K: must be >= 2")
        if self.window < 5:
            errors.append("window: must be >= 5")
        if not self.tol > 0:
            errors.append("tol: must be > 0")
        if not (self.lr_phase1 > 0 and self.lr_phase2 > 0):
            errors.append("lr_phase1/lr_phase2: must be > 0")
        if self.max_iters < 0 or (self.refit_iters is not None and self.refit_iters < 0):
            errors.append("max_iters/refit_iters: must be >= 0")
        if self.alpha <= 0:
            errors.append("alpha: must be > 0")
        if self.nugget < 0:
            errors.append("nugget: must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ElboTrace:
    elbo: list = field(default_factory=list)
    terms: dict = field(default_factory=lambda: {k: [] for k in TERMS})
    stop_reason: str = "max_iters"
    best_iteration: int | None = None

    def append(self, value: float, terms: dict):
        self.elbo.append(value)
        for k in TERMS:
            self.terms[k].append(terms[k])

    def __len__(self):
        return len(self.elbo)

    def moving_average(self, window: int) -> np.ndarray:
        e = np.asarray(self.elbo)
        if e.size < window:
            return np.zeros(0)
        return np.convolve(e, np.ones(window) / window, mode="valid")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "elbo", *TERMS])
            for i, e in enumerate(self.elbo):
                w.writerow([i, repr(e)] + [repr(self.terms[k][i]) for k in TERMS])


# ------------------------------------------------------------------- ELBO


def arrange_data(values: np.ndarray) -> np.ndarray:
    """n x p x L -> p x (n*L) with column ``t*L + k``."""
    n, p, L = values.shape
    return values.transpose(1, 0, 2).reshape(p, n * L)


def draw_noise(model: Df2mModel, rng: np.random.Generator, config: TrainConfig) -> dict:
    return {"eps": [rng.standard_normal((model.M * model.n, model.K))
                    for _ in range(config.factor_draws)],
            "u": rng.uniform(size=(config.stick_draws, model.M))}


def elbo_terms(model: Df2mModel, values: np.ndarray, noise: dict, history: np.ndarray,
               trainable: tuple = ("variational", "encoder")):
    """Build the ELBO on a fresh tape.

    ``values`` is the (centered) n x p x L data; ``noise`` holds the factor
    draws ``eps`` (list of (M*n) x K) and stick uniforms ``u``; ``history``
    is the constant encoder input. Returns ``(elbo, terms, tape, V, E)``
    where ``V``/``E`` map parameter names to tape nodes.
    """
    n, p, L = values.shape
    M, K = model.M, model.K
    if n != model.n or p != model.p or L != model.L:
        raise ValueError(f"data shape {values.shape} does not match the model "
                         f"(n={model.n}, p={model.p}, L={model.L})")
    tape = ad.Tape()
    V = param_nodes(tape, model.variational, "variational" in trainable)
    E = param_nodes(tape, model.encoder_params, "encoder" in trainable)

    sig_eps = ad.softplus(V["sigma_eps"])
    ls, var = ad.softplus(V["ls"]), ad.softplus(V["var"])
    grid, ind = model.grid, model.inducing
    Suu = kernel_nodes(model.spatial_kind, ls, var, grid, grid)
    Suv = kernel_nodes(model.spatial_kind, ls, var, grid, ind)
    Svv = kernel_nodes(model.spatial_kind, ls, var, ind, ind)
    Lvv = ad.cholesky(Svv)
    A = ad.transpose(ad.cho_solve(Lvv, ad.transpose(Suv)))  # L x K

    feats = encode(E, history, model.encoder)
    Sx = temporal_gram(feats, model.temporal) + model.temporal.nugget * np.eye(n)
    Lx = ad.cholesky(Sx)

    lower, diag = chol_masks(K, M * n)
    raw = V["chol"]
    blocks = raw * lower + ad.softplus(raw) * diag

    m = ad.sigmoid(V["m"])
    eta = V["eta"]
    sq = ad.softplus(V["sigma_q"])
    E1, E2 = beta_moments_nodes(m, eta, sq)
    var_beta = E2 - ad.square(E1)
    Y = tape.constant(arrange_data(values))

    sq_err = None
    for eps in noise["eps"]:
        eps_row = eps.reshape(1, M * n * K)
        scaled = ad.reshape(blocks * eps_row, (K * M * n, K))
        noise_v = ad.transpose(ad.reshape(ad.sum_(scaled, axis=1), (K, M * n)))
        Xv = V["mu"] + noise_v  # (M*n) x K
        Xu = ad.reshape(Xv @ ad.transpose(A), (M, n * L))
        R = Y - E1 @ Xu
        term = ad.sum_(ad.square(R)) + ad.sum_(var_beta @ ad.square(Xu))
        sq_err = term if sq_err is None else sq_err + term
    sq_err = sq_err * (1.0 / len(noise["eps"]))
    inv_var = 1.0 / ad.square(sig_eps)
    likelihood = (-0.5 * inv_var * sq_err
                  - (0.5 * n * p * L) * (np.log(2.0 * np.pi) + 2.0 * ad.log(sig_eps)))
    schur_tr = ad.trace(Suu - A @ ad.transpose(Suv))
    prop3 = 0.5 * inv_var * ad.sum_(E2) * ad.trace(Sx) * schur_tr
    kl_ind = kl_inducing_nodes(V["mu"], blocks, Lx, Lvv, M)
    tau1, tau0 = ad.softplus(V["tau1"]), ad.softplus(V["tau0"])
    kl_z = kl_ibp_nodes(tau1, tau0, m, model.alpha, noise["u"])
    kl_a = kl_loadings_nodes(eta, sq, ad.softplus(V["sigma_a"]))

    nodes = {"likelihood": likelihood, "kl_inducing": kl_ind, "kl_ibp": kl_z,
             "kl_loadings": kl_a, "prop3_constant": prop3}
    for name, node in nodes.items():
        if not np.all(np.isfinite(node.value)):
            raise FloatingPointError(f"non-finite ELBO term: {name}")
    elbo = likelihood - kl_ind - kl_z - kl_a - prop3
    terms = {k: float(v.value[0, 0]) for k, v in nodes.items()}
    return elbo, terms, tape, V, E


def centered(model: Df2mModel, data) -> np.ndarray:
    values = data.values if isinstance(data, FunctionalPanel) else np.asarray(data, dtype=float)
    if isinstance(data, FunctionalPanel) and not np.allclose(data.grid, model.grid):
        raise ValueError("data grid does not match the model grid")
    return values - model.offset[None]


def elbo_estimate(model: Df2mModel, data, rng: np.random.Generator | None = None,
                  noise: dict | None = None, config: TrainConfig | None = None,
                  history: np.ndarray | None = None) -> tuple[float, dict]:
    """One Monte Carlo ELBO estimate and its term breakdown."""
    config = config or TrainConfig(encoder=model.encoder.kind, M=model.M, K=model.K)
    if noise is None:
        noise = draw_noise(model, rng if rng is not None else np.random.default_rng(), config)
    history = model.history() if history is None else history
    elbo, terms, *_ = elbo_terms(model, centered(model, data), noise, history, trainable=())
    return float(elbo.value[0, 0]), terms


def elbo_and_grads(model, values, noise, history, group: str):
    elbo, terms, tape, V, E = elbo_terms(model, values, noise, history, trainable=(group,))
    nodes = V if group == "variational" else E
    g = ad.backward(elbo, list(nodes.values()))
    return float(elbo.value[0, 0]), terms, {k: g[n] for k, n in nodes.items()}


# -------------------------------------------------------------- optimizer


class Adam:
    """Adam for gradient ascent on a dict of arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] + self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------- initialization


def pca_factors(values: np.ndarray, M: int):
    """Top-``M`` principal scores (n x M x L) and loadings (p x M).

    Variables are the PCA dimensions, (time, grid point) pairs the samples.
    Columns beyond the data rank are zero.
    """
    n, p, L = values.shape
    D = values.transpose(0, 2, 1).reshape(n * L, p)
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    r = min(M, s.size)
    scores = np.zeros((n * L, M))
    load = np.zeros((p, M))
    scores[:, :r] = U[:, :r] * s[:r]
    load[:, :r] = Vt[:r].T
    return scores.reshape(n, L, M).transpose(0, 2, 1), load


def init_model(data: FunctionalPanel, config: TrainConfig) -> Df2mModel:
    values = data.values
    n, p, L = values.shape
    if n < 1 or p < 1 or L < 1:
        raise ValueError("empty panel")
    sd = float(values.std())
    if not sd > 0:
        raise ValueError("degenerate data: zero variance")
    M, K = config.M, config.K
    offset = values.mean(axis=0) if config.center else np.zeros((p, L))
    Yc = values - offset[None]
    rng = rng_stream(config.seed, "init")
    enc_cfg = EncoderConfig(config.encoder, input_dim=M * K, hidden_size=config.hidden_size,
                            heads=config.heads, seed=config.seed)
    enc = init_encoder(enc_cfg, rng)
    eta = rng.normal(0.0, 0.1, size=(p, M))

    inducing = np.linspace(0.0, 1.0, K)
    scores, _ = pca_factors(Yc, M)
    # one common scale keeps the relative sizes of the principal directions
    lead = float(np.sqrt(np.mean(scores[:, 0] ** 2)))
    scores = scores / lead if lead > 0 else scores
    mu = np.empty((M, n, K))
    for r in range(M):
        for t in range(n):
            mu[r, t] = np.interp(inducing, data.grid, scores[t, r]) if L > 1 else scores[t, r, 0]
    lower, diag = chol_masks(K, M * n)
    chol = diag * softplus_inv(np.sqrt(0.1))
    sd_c = float(Yc.std()) or sd
    variational = {
        "mu": mu.reshape(M * n, K), "chol": chol,
        "tau1": np.full((1, M), softplus_inv(config.alpha)),
        "tau0": np.full((1, M), softplus_inv(1.0)),
        "m": np.zeros((p, M)), "eta": eta,
        "sigma_q": np.full((p, M), softplus_inv(0.1)),
        "sigma_eps": np.full((1, 1), softplus_inv(0.1 * sd_c)),
        "sigma_a": np.full((1, 1), softplus_inv(1.0)),
        "ls": np.full((1, 1), softplus_inv(0.2)),
        "var": np.full((1, 1), softplus_inv(1.0)),
    }
    temporal = TemporalKernel("se", None, 1.0, config.normalize, config.nugget)
    return Df2mModel(grid=data.grid.copy(), inducing=inducing, M=M, spatial_kind=config.spatial_kind,
                     temporal=temporal, encoder=enc_cfg, alpha=config.alpha,
                     variational=variational, encoder_params=enc, offset=offset,
                     meta={"trained": False, "seed": config.seed, "iterations": 0})


def warm_start(prev: Df2mModel, data: FunctionalPanel, config: TrainConfig, shift: int) -> Df2mModel:
    """Start a refit on ``data`` from ``prev``.

    Time-indexed blocks are shifted by ``shift`` periods (the number of
    periods dropped from the front of the window); new trailing periods copy
    the last available block. Everything else carries over unchanged.
    """
    new = init_model(data, config)
    if (prev.M, prev.K, prev.p, prev.L) != (new.M, new.K, new.p, new.L):
        raise ValueError("warm start needs matching M, K, p and L")
    n_old, n_new, M, K = prev.n, new.n, new.M, new.K
    idx = np.clip(np.arange(n_new) + shift, 0, n_old - 1)
    mu_old = prev.variational["mu"].reshape(M, n_old, K)
    ch_old = prev.variational["chol"].reshape(K, M, n_old, K)
    v = {k: a.copy() for k, a in prev.variational.items()}
    v["mu"] = mu_old[:, idx].reshape(M * n_new, K)
    v["chol"] = ch_old[:, :, idx].reshape(K, M * n_new * K)
    new.variational = v
    new.encoder_params = {k: a.copy() for k, a in prev.encoder_params.items()}
    new.meta = dict(prev.meta, trained=False, iterations=0)
    return new


# ------------------------------------------------------------------- fit


def fit(model: Df2mModel, data: FunctionalPanel, config: TrainConfig,
        max_iters: int | None = None) -> tuple[Df2mModel, ElboTrace]:
    """Alternate the two phases until the moving-average ELBO settles.

    Every ``W`` iterations (from ``2W`` on) the change between consecutive
    ``W``-step moving averages is compared with ``tol * |MA|``: a smaller
    change stops the run, three consecutive drops beyond it raise
    :class:`DivergenceError`. The snapshot with the best moving average is
    returned.
    """
    iters = config.max_iters if max_iters is None else max_iters
    model = model.copy()
    trace = ElboTrace()
    if iters == 0:
        return model, trace
    values = centered(model, data)
    rng = rng_stream(config.seed, "training")
    opt1, opt2 = Adam(config.lr_phase1), Adam(config.lr_phase2)
    W = config.window
    best, best_ma, drops, prev_ma = None, -np.inf, 0, None
    for it in range(iters):
        for _ in range(config.phase1_steps):
            history = model.history()
            value, terms, g = elbo_and_grads(model, values, draw_noise(model, rng, config),
                                             history, "variational")
            opt1.step(model.variational, g)
        trace.append(value, terms)
        for _ in range(config.phase2_steps):
            history = model.history()
            _, _, g = elbo_and_grads(model, values, draw_noise(model, rng, config),
                                     history, "encoder")
            opt2.step(model.encoder_params, g)
            if model.temporal.normalize:
                model.encoder_params = normalize_weights(model.encoder_params)
        k = it + 1
        if k % W == 0:
            ma = float(np.mean(trace.elbo[-W:]))
            if ma > best_ma:
                best_ma, best = ma, model.copy()
                trace.best_iteration = k
            if prev_ma is not None:
                delta = ma - prev_ma
                thresh = config.tol * abs(ma)
                if abs(delta) < thresh:
                    trace.stop_reason = "converged"
                    break
                drops = drops + 1 if delta <= -thresh else 0
                if drops >= 3:
                    trace.stop_reason = "diverged"
                    raise DivergenceError(
                        f"ELBO moving average decreased for 3 consecutive windows "
                        f"(iteration {k})", trace)
            prev_ma = ma
    out = best if best is not None else model
    out.meta = dict(out.meta, trained=True, iterations=len(trace))
    logger.info("fit stopped after %d iterations (%s)", len(trace), trace.stop_reason)
    return out, trace


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
