"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one PASS/FAIL line (see ``conftest.py``); the lines are
printed together at the end of the pytest run. Run this file directly to
execute only the acceptance suite.
"""
import time

import numpy as np
import pytest

from df2m.cli import run
from df2m.data import FunctionalPanel, SimConfig, simulate_panel
from df2m.evaluate import (BaselineConfig, BaselineForecaster, Df2mForecaster,
                           GlobalMeanForecaster, RollingConfig, metric_std, rolling_forecast)
from df2m.gauss import (MatrixNormal, conditional_gaussian_oracle,
                        kl_inducing, kronecker_trace_identity, sample_matrix_normal)
from df2m.kernels import SpatialKernel, gram, temporal_gram
from df2m.model import InducingGrid
from df2m.mtgp import (interp_matrix, posterior_cov_at, posterior_mean_at, predict_inducing,
                       predict_next, prop3_constant, schur_complement)
from df2m.trainer import TrainConfig, centered, fit, init_model
from helpers import (dense_joint, dense_kl, elbo_fd_grads, grad_error_ratio, micro_instance,
                     random_instance, random_posterior, random_spd)

ENCODERS = ("lin", "lstm", "gru", "attn")
SEEDS = range(5)


def verdict(record, number, ok, detail):
    record(number, bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    worst = 0.0
    for encoder in ENCODERS:
        model, panel, _, noise = micro_instance(seed=1, encoder=encoder)
        values = centered(model, panel)
        for group in ("variational", "encoder"):
            ratio = grad_error_ratio(*elbo_fd_grads(model, values, noise, group), rtol=1e-4)
            worst = max(worst, ratio)
    elapsed = time.perf_counter() - start
    verdict(acceptance, 1, worst <= 1.0 and elapsed < 60,
            f"worst error {worst:.3f} x tolerance (rel 1e-4), 4 encoders x 2 groups, {elapsed:.1f}s")


# ------------------------------------------------------------------ 2

def test_criterion_2_kl_oracle(acceptance):
    rng = np.random.default_rng(2024)
    kl_err, sizes = 0.0, []
    for _ in range(50):
        n = int(rng.integers(1, 9))
        K = int(rng.integers(1, min(8, 64 // n) + 1))
        sizes.append(n * K)
        mu, S, prior = random_instance(rng, n, K)
        kl_err = max(kl_err, abs(kl_inducing(mu, S, prior) - dense_kl(mu, S, prior)))
    trace_err = 0.0
    for _ in range(20):
        n, K = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        S = np.stack([random_spd(rng, K) for _ in range(n)])
        dense, structured = kronecker_trace_identity(random_spd(rng, n), random_spd(rng, K), S)
        trace_err = max(trace_err, abs(dense - structured))
        Sx, Sv, mu = random_spd(rng, n), random_spd(rng, K), rng.standard_normal((n, K))
        dense = mu.ravel() @ np.linalg.solve(np.kron(Sx, Sv), mu.ravel())
        structured = np.trace(mu.T @ np.linalg.solve(Sx, mu) @ np.linalg.inv(Sv))
        trace_err = max(trace_err, abs(dense - structured))
    verdict(acceptance, 2, kl_err <= 1e-8 and trace_err <= 1e-10 and max(sizes) <= 64,
            f"KL max |err| {kl_err:.1e} on 50 instances (nK <= {max(sizes)}); "
            f"trace identities max |err| {trace_err:.1e}")


# ------------------------------------------------------------------ 3

def test_criterion_3_posterior_identities(acceptance):
    start = time.perf_counter()
    spatial = SpatialKernel("se", 0.3, 1.2)
    rng = np.random.default_rng(3)
    # posterior mean against dense conditioning (n=4, K=3, L=5)
    n, K, L = 4, 3, 5
    q = random_posterior(rng, n, 1, K)
    grid = InducingGrid(np.array([0.0, 0.45, 1.0]))
    u = np.sort(rng.uniform(0, 1, L))
    joint = dense_joint(random_spd(rng, n), spatial, u, grid.v)
    mean, _ = conditional_gaussian_oracle(np.zeros(n * (K + L)), joint, np.arange(n * K),
                                          q.mu[:, 0].ravel())
    X_u = mean[n * K:].reshape(n, L)
    mean_err = max(np.max(np.abs(posterior_mean_at(q, grid, u, spatial, t, 0) - X_u[t]))
                   for t in range(n))
    # posterior covariance by the law of total variance (n=3, K=2, L=3)
    n, K, L = 3, 2, 3
    grid, u = InducingGrid(np.array([0.1, 0.8])), np.array([0.0, 0.4, 0.9])
    q = random_posterior(rng, n, 1, K)
    sigma_x = random_spd(rng, n)
    joint = dense_joint(sigma_x, spatial, u, grid.v)
    nv = n * K
    _, cond = conditional_gaussian_oracle(np.zeros(nv + n * L), joint, np.arange(nv), np.zeros(nv))
    B = joint[nv:, :nv] @ np.linalg.inv(joint[:nv, :nv])
    S_blk = np.zeros((nv, nv))
    for t in range(n):
        S_blk[t * K:(t + 1) * K, t * K:(t + 1) * K] = q.S[t, 0]
    total, _, _ = posterior_cov_at(q, grid, u, spatial, sigma_x, 0)
    cov_err = float(np.max(np.abs(total - (cond[nv:, nv:] + B @ S_blk @ B.T))))
    # proxy-sampling constant against Monte Carlo over q(beta) and matrix-normal residual paths
    n, p, M = 3, 2, 2
    v, u = np.linspace(0, 1, 3), np.array([0.05, 0.3, 0.55, 0.95])
    sigma_x = random_spd(rng, n)
    m = rng.uniform(0.2, 0.9, (p, M))
    eta, sq = rng.standard_normal((p, M)), rng.uniform(0.2, 0.6, (p, M))
    sigma_eps = 0.7
    exact = prop3_constant(float(np.sum(m * (eta ** 2 + sq ** 2))), sigma_eps, sigma_x,
                           gram(spatial, u, u), gram(spatial, u, v), gram(spatial, v, v))
    dist = MatrixNormal(np.zeros((len(u), n)), schur_complement(spatial, u, v), sigma_x)
    N = 10_000
    vals = np.empty(N)
    for s in range(N):
        beta = rng.binomial(1, m) * rng.normal(eta, sq)
        X2 = np.stack([sample_matrix_normal(dist, rng) for _ in range(M)])
        vals[s] = np.sum(np.einsum("pm,mln->pln", beta, X2) ** 2) / (2 * sigma_eps ** 2)
    z = abs(vals.mean() - exact) / (vals.std() / np.sqrt(N))
    elapsed = time.perf_counter() - start
    verdict(acceptance, 3, mean_err <= 1e-8 and cov_err <= 1e-8 and z <= 3 and elapsed < 120,
            f"mean |err| {mean_err:.1e}, covariance |err| {cov_err:.1e}, proxy constant MC z={z:.2f} "
            f"(1e4 draws), {elapsed:.1f}s")


# ------------------------------------------------------------------ 4

def test_criterion_4_prediction_oracle(acceptance):
    worst = 0.0
    for i, encoder in enumerate(ENCODERS):
        panel, _ = simulate_panel(SimConfig(p=3, n=4, L=5, M0=1), np.random.default_rng(i))
        model = init_model(panel, TrainConfig(encoder=encoder, M=2, K=4, hidden_size=4, seed=i))
        rng = np.random.default_rng(100 + i)
        model.variational["mu"] = rng.standard_normal(model.variational["mu"].shape)
        model.variational["m"] = rng.standard_normal(model.variational["m"].shape)
        model.meta["trained"] = True
        n, M, K = model.n, model.M, model.K
        means = model.inducing_means()
        h = model.features(np.vstack([np.zeros((1, M * K)), means.reshape(n, -1)]))
        joint = np.kron(temporal_gram(h, model.temporal) + model.temporal.nugget * np.eye(n + 1),
                        gram(model.spatial, model.inducing, model.inducing))
        X_next = np.stack([conditional_gaussian_oracle(np.zeros((n + 1) * K), joint,
                                                       np.arange(n * K), means[:, r].ravel())[0][n * K:]
                           for r in range(M)])
        A = interp_matrix(model.spatial, model.grid, model.inducing)
        q = model.loading_posterior()
        Y = (q.m * q.eta) @ (X_next @ A.T) + model.offset
        worst = max(worst, np.max(np.abs(predict_inducing(model)[0] - X_next)),
                    np.max(np.abs(predict_next(model) - Y)))
    verdict(acceptance, 4, worst <= 1e-8, f"h=1 forecast max |err| {worst:.1e} over 4 encoders")


# ------------------------------------------------------------------ 5

def test_criterion_5_generative_fidelity(acceptance):
    cfg = SimConfig(p=1, n=3, L=3, M0=2, rho=0.6)
    rng = np.random.default_rng(5)
    N = 10_000
    draws, sigma_x, spatial = [], None, None
    for _ in range(N):
        _, truth = simulate_panel(cfg, rng)
        draws.append(truth["X"].transpose(1, 0, 2).reshape(cfg.M0, -1))  # factor x (t, u)
        sigma_x, spatial = truth["sigma_x"], truth["spatial"]
    X = np.stack(draws)  # N x M0 x nL
    grid = np.linspace(0, 1, cfg.L)
    target = np.kron(sigma_x, gram(spatial, grid, grid))
    var = np.diag(target)
    worst = 0.0
    for r in range(cfg.M0):
        emp = X[:, r].T @ X[:, r] / N
        se = np.sqrt((np.outer(var, var) + target ** 2) / N)
        worst = max(worst, float(np.max(np.abs(emp - target) / se)))
    cross = X[:, 0].T @ X[:, 1] / N
    worst_cross = float(np.max(np.abs(cross) / np.sqrt(np.outer(var, var) / N)))
    verdict(acceptance, 5, worst <= 3 and worst_cross <= 3,
            f"max |emp - Sigma_X kron K| = {worst:.2f} SE, max |r != l cov| = {worst_cross:.2f} SE "
            f"({target.size} entries each, 1e4 replications)")


# ------------------------------------------------------------------ 6

@pytest.mark.slow
def test_criterion_6_training_sanity(acceptance):
    recovered, monotone, strict, worst_z, times = [], [], [], [], []
    for seed in SEEDS:
        panel, _ = simulate_panel(SimConfig(p=20, n=40, L=12, M0=3), np.random.default_rng(seed))
        cfg = TrainConfig(encoder="lin", M=8, max_iters=1500, seed=seed, lr_phase1=0.01, tol=1e-5)
        start = time.perf_counter()
        model, trace = fit(init_model(panel, cfg), panel, cfg)
        times.append(time.perf_counter() - start)
        # The ELBO is a Monte Carlo estimate, so a block-to-block drop counts
        # as a decrease only when it exceeds 3 standard errors of the difference.
        W = cfg.window
        elbo = np.asarray(trace.elbo[:len(trace) // W * W]).reshape(-1, W)
        deltas = np.diff(elbo.mean(axis=1))
        se = np.sqrt((elbo[1:].var(axis=1, ddof=1) + elbo[:-1].var(axis=1, ddof=1)) / W)
        worst_z.append(float(np.min(deltas / se)))
        monotone.append(worst_z[-1] >= -3.0)
        strict.append(bool(np.all(deltas >= 0)))
        recovered.append(int(np.sum(model.loading_posterior().m.max(axis=0) > 0.5)))
    hits = sum(abs(c - 3) <= 1 for c in recovered)
    ok = all(monotone) and hits >= 4 and max(times) < 600
    verdict(acceptance, 6, ok,
            f"active columns {recovered} (M0=3, {hits}/5 within +-1); 20-step MA ELBO "
            f"non-decreasing within 3 SE {sum(monotone)}/5 (worst z {min(worst_z):.2f}, "
            f"strictly {sum(strict)}/5); max {max(times):.0f}s per seed")


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_criterion_7_forecast_skill(acceptance):
    start = time.perf_counter()
    rows = []
    for seed in SEEDS:
        sim = SimConfig(p=20, n=40, L=12, M0=3, dynamic="nonlinear-recurrent", sigma_eps=0.1)
        panel, _ = simulate_panel(sim, np.random.default_rng(seed))
        rc = RollingConfig(n1=30)
        tc = TrainConfig(encoder="lstm", M=6, max_iters=1500, refit_iters=300, seed=seed,
                         lr_phase1=0.03)
        mspe = [rolling_forecast(panel, rc, [1], f).summary()["1"]["mspe"]
                for f in (Df2mForecaster(tc), GlobalMeanForecaster(),
                          BaselineForecaster(BaselineConfig("lstm", steps=500, seed=seed)))]
        rows.append(mspe)
    elapsed = time.perf_counter() - start
    beat_mean = sum(d < g for d, g, _ in rows)
    beat_base = sum(d < b for d, _, b in rows)
    table = ", ".join(f"{d:.4f}/{g:.4f}/{b:.4f}" for d, g, b in rows)
    verdict(acceptance, 7, beat_mean == 5 and beat_base >= 3 and elapsed < 1800,
            f"beats global mean {beat_mean}/5, beats LSTM baseline {beat_base}/5, "
            f"{elapsed / 60:.1f} min; MSPE df2m/mean/baseline: {table}")


# ------------------------------------------------------------------ 8

def test_criterion_8_metrics(acceptance):
    checks = []
    # Dyadic data so every sum and difference is exact in floating point.
    rng = np.random.default_rng(8)
    data = FunctionalPanel(rng.integers(-16, 16, (10, 2, 3)) / 4.0, np.linspace(0, 1, 3))

    def oracle(c):
        def forecast(train, H, start):
            end = start + train.values.shape[0]
            return data.values[end:end + H] + c
        return forecast

    for c, (mape, mspe) in ((0.0, (0.0, 0.0)), (0.5, (0.5, 0.25)), (-1.25, (1.25, 1.5625))):
        s = rolling_forecast(data, RollingConfig(n1=6), [1, 2], oracle(c)).summary()
        for h in ("1", "2"):
            checks.append(s[h]["mape"] == mape and s[h]["mspe"] == mspe and s[h]["mape_std"] == 0.0
                          and s[h]["mspe_std"] == 0.0)
    # two-window toy: p=1, L=2, targets at periods 2 and 3
    toy = FunctionalPanel(np.array([[[0.0, 0.0]], [[0.0, 0.0]], [[1.0, 2.0]], [[3.0, -1.0]]]),
                          [0.0, 1.0])
    preds = {2: np.array([[1.5, 1.0]]), 3: np.array([[3.0, 1.0]])}
    s = rolling_forecast(toy, RollingConfig(n1=2), [1],
                         lambda tr, H, st: preds[st + tr.values.shape[0]][None]).summary()["1"]
    # window MAPE 0.75, 1.0; window MSPE 0.625, 2.0; normalizer windows - 1 = 1
    checks.append(s["mape"] == 0.875 and s["mspe"] == 1.3125)
    checks.append(s["mape_std"] == np.sqrt(0.125 ** 2 * 2) and s["mspe_std"] == np.sqrt(0.6875 ** 2 * 2))
    checks.append(metric_std([1.0, 3.0], [1.0, 9.0]) == (np.sqrt(2.0), np.sqrt(32.0)))
    verdict(acceptance, 8, all(checks),
            f"{sum(checks)}/{len(checks)} exact checks (stubs zero/c/c^2 at 2 horizons, 2-window toy)")


# ------------------------------------------------------------------ 9

def _cli_outputs(root, tag):
    """Run every subcommand once into ``root/tag``; return {relative path: bytes}."""
    base = root / tag
    small = ["--seed", "7", "--set", "M=2", "--set", "K=3", "--set", "hidden_size=3",
             "--set", "max_iters=20", "--set", "refit_iters=5"]
    calls = [
        ["simulate", "--out", str(base / "sim"), "--seed", "7", "--set", "p=3", "--set", "n=9",
         "--set", "L=4", "--set", "M0=1", "--set", "dynamic=nonlinear-recurrent"],
        ["fit", "--data", str(base / "sim" / "panel.csv"), "--out", str(base / "fit"),
         "--encoder", "attn"] + small,
        ["predict", "--checkpoint", str(base / "fit" / "checkpoint.df2m"), "--out",
         str(base / "pred"), "--horizons", "1,2,3"],
        ["inspect", "--checkpoint", str(base / "fit" / "checkpoint.df2m"), "--out",
         str(base / "insp")],
        ["evaluate", "--data", str(base / "sim" / "panel.csv"), "--out", str(base / "eval"),
         "--set", "n1=7", "--horizons", "1,2", "--set", "baseline=true",
         "--set", "baseline_steps=20"] + small,
    ]
    codes = [run(argv) for argv in calls]
    files = {str(p.relative_to(base)): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_9_determinism(acceptance, tmp_path, capsys):
    codes_a, a = _cli_outputs(tmp_path, "a")
    out_a = capsys.readouterr().out.replace(str(tmp_path / "a"), "")
    codes_b, b = _cli_outputs(tmp_path, "b")
    out_b = capsys.readouterr().out.replace(str(tmp_path / "b"), "")
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a) and out_a == out_b
    verdict(acceptance, 9, codes_a == codes_b == [0] * 5 and same and len(a) == 10,
            f"5 commands x 2 runs, {len(a)} output files, "
            f"{sum(a[k] == b.get(k) for k in a)} byte-identical")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
