"""Rolling-window forecast evaluation, error metrics and baselines.

For horizon ``h`` the targets are periods ``n1+h .. n`` (1-based), one per
window; window ``i`` trains on the ``n1`` periods ending at ``n1+i``
(``sliding``) or on all periods up to ``n1+i`` (``expanding``).
MAPE/MSPE average the absolute/squared errors over variables, grid points
and windows; their standard deviations spread the per-window averages
around that mean with normalizer ``windows - 1``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import FunctionalPanel
from .model import rng_stream
from .mtgp import predict_path
from .seqnets import EncoderConfig, encode, init_encoder
from .trainer import Adam, DivergenceError, TrainConfig, fit, init_model, warm_start

logger = logging.getLogger(__name__)

MODES = ("sliding", "expanding")


# ------------------------------------------------------------------ metrics


def window_errors(pred: np.ndarray, truth: np.ndarray):
    """Per-window mean absolute and squared errors for ``W x p x L`` arrays."""
    diff = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    axes = tuple(range(1, diff.ndim))
    return np.abs(diff).mean(axis=axes), (diff ** 2).mean(axis=axes)


def metrics(pred: np.ndarray, truth: np.ndarray):
    """(MAPE, MSPE) over all windows, variables and grid points."""
    ae, se = window_errors(pred, truth)
    return float(ae.mean()), float(se.mean())


def metric_std(window_mape, window_mspe):
    """(MAPE-STD, MSPE-STD) from per-window errors; needs >= 2 windows."""
    a = np.asarray(window_mape, dtype=float)
    s = np.asarray(window_mspe, dtype=float)
    if a.size < 2 or s.size != a.size:
        raise ValueError("metric_std needs at least 2 windows")
    return (float(np.sqrt(np.sum((a - a.mean()) ** 2) / (a.size - 1))),
            float(np.sqrt(np.sum((s - s.mean()) ** 2) / (s.size - 1))))


@dataclass
class HorizonResult:
    horizon: int
    windows: list  # window indices that produced a forecast
    targets: list  # 0-based target period per window
    predictions: np.ndarray  # W x p x L
    truth: np.ndarray
    skipped: list = field(default_factory=list)

    def summary(self) -> dict:
        if not self.windows:
            return {"mape": None, "mspe": None, "mape_std": None, "mspe_std": None,
                    "windows": 0, "skipped": list(self.skipped)}
        ae, se = window_errors(self.predictions, self.truth)
        stds = metric_std(ae, se) if len(ae) >= 2 else (None, None)
        return {"mape": float(ae.mean()), "mspe": float(se.mean()), "mape_std": stds[0],
                "mspe_std": stds[1], "windows": len(self.windows), "skipped": list(self.skipped)}


@dataclass
class ForecastReport:
    model: str
    results: dict  # horizon -> HorizonResult
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {str(h): r.summary() for h, r in sorted(self.results.items())}

    def to_dict(self) -> dict:
        return {"model": self.model, "meta": self.meta, "horizons": self.summary()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_csv(self, path, times=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "horizon", "window", "target_index", "target_time", "mape", "mspe"])
            for h, r in sorted(self.results.items()):
                if not r.windows:
                    continue
                ae, se = window_errors(r.predictions, r.truth)
                for i, win in enumerate(r.windows):
                    t = r.targets[i]
                    label = times[t] if times is not None else str(t)
                    w.writerow([self.model, h, win, t, label, repr(float(ae[i])), repr(float(se[i]))])


# ---------------------------------------------------------------- harness


@dataclass
class RollingConfig:
    n1: int
    mode: str = "sliding"

    def __post_init__(self):
        if self.n1 < 2:
            raise ValueError("n1: training window needs at least 2 periods")
        if self.mode not in MODES:
            raise ValueError(f"mode: unknown window mode {self.mode!r}, expected one of {MODES}")


def rolling_forecast(data: FunctionalPanel, config: RollingConfig, horizons, forecaster=None,
                     train: TrainConfig | None = None, name: str | None = None) -> ForecastReport:
    """Fit on each window and score the ``h``-step forecasts.

    ``forecaster(train_panel, H, start)`` returns ``H x p x L`` predictions for
    the ``H`` periods following ``train_panel``; ``start`` is the index of its
    first period in ``data``. The default refits the factor model per window.
    """
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    n = data.values.shape[0]
    n1, H = config.n1, horizons[-1]
    if n1 + H > n:
        raise ValueError(f"window too short: n1 + max(h) = {n1 + H} exceeds n = {n}")
    if forecaster is None:
        forecaster = Df2mForecaster(train or TrainConfig())
    preds: dict[int, list] = {h: [] for h in horizons}
    skipped: dict[int, list] = {h: [] for h in horizons}
    for i in range(n - n1):
        end = n1 + i
        start = i if config.mode == "sliding" else 0
        steps = min(H, n - end)
        wanted = [h for h in horizons if h <= steps]
        if not wanted:
            break
        try:
            out = np.asarray(forecaster(data.slice_time(start, end), max(wanted), start))
        except DivergenceError as exc:
            logger.warning("window %d skipped: %s", i, exc)
            for h in wanted:
                skipped[h].append(i)
            continue
        for h in wanted:
            preds[h].append((i, end + h - 1, out[h - 1]))
    results = {}
    for h in horizons:
        rows = preds[h]
        p, L = data.values.shape[1:]
        results[h] = HorizonResult(
            horizon=h, windows=[r[0] for r in rows], targets=[r[1] for r in rows],
            predictions=np.array([r[2] for r in rows]).reshape(len(rows), p, L),
            truth=np.array([data.values[r[1]] for r in rows]).reshape(len(rows), p, L),
            skipped=skipped[h])
    label = name or getattr(forecaster, "name", type(forecaster).__name__)
    return ForecastReport(label, results, {"n1": n1, "mode": config.mode, "n": n,
                                           "horizons": horizons})


# ------------------------------------------------------------- forecasters


class Df2mForecaster:
    """Refits the factor model per window, warm-starting from the previous fit."""

    def __init__(self, config: TrainConfig, warm: bool = True):
        self.config = config
        self.warm = warm
        self.name = f"df2m-{config.encoder}"
        self._prev = None  # (model, start)
        self.traces = []

    def __call__(self, train: FunctionalPanel, H: int, start: int) -> np.ndarray:
        cfg = self.config
        if self.warm and self._prev is not None:
            prev, prev_start = self._prev
            model = warm_start(prev, train, cfg, shift=start - prev_start)
            iters = cfg.max_iters if cfg.refit_iters is None else cfg.refit_iters
        else:
            model = init_model(train, cfg)
            iters = cfg.max_iters
        model, trace = fit(model, train, cfg, max_iters=iters)
        self.traces.append(trace)
        self._prev = (model, start)
        return predict_path(model, horizon=H)


class GlobalMeanForecaster:
    """Predicts the training-window mean curve of each variable."""

    name = "global-mean"

    def __call__(self, train: FunctionalPanel, H: int, start: int) -> np.ndarray:
        return np.repeat(train.values.mean(axis=0)[None], H, axis=0)


@dataclass
class BaselineConfig:
    encoder: str = "lstm"
    hidden_size: int = 15
    heads: int = 1
    steps: int = 500
    lr: float = 1e-2
    seed: int = 0


class BaselineForecaster:
    """Encoder plus linear readout mapping ``Y_{t-1}`` to ``Y_t`` (squared error)."""

    def __init__(self, config: BaselineConfig):
        self.config = config
        self.name = f"baseline-{config.encoder}"

    def _setup(self, p: int, L: int):
        c = self.config
        enc = EncoderConfig(c.encoder, input_dim=p * L, hidden_size=c.hidden_size, heads=c.heads,
                            seed=c.seed)
        params = init_encoder(enc, rng_stream(c.seed, "init"), readout=p * L)
        return enc, params

    @staticmethod
    def _forward(tape, nodes, inputs, enc):
        return encode(nodes, inputs, enc) @ nodes["out_W"] + nodes["out_b"]

    def train(self, values: np.ndarray):
        n, p, L = values.shape
        enc, params = self._setup(p, L)
        flat = values.reshape(n, p * L)
        inputs, targets = flat[:-1], flat[1:]
        opt = Adam(self.config.lr)
        for _ in range(self.config.steps):
            tape = ad.Tape()
            nodes = {k: tape.variable(v) for k, v in params.items()}
            out = self._forward(tape, nodes, inputs, enc)
            loss = ad.mean(ad.square(out - targets))
            g = ad.backward(loss, list(nodes.values()))
            opt.step(params, {k: -g[nd] for k, nd in nodes.items()})
        return enc, params

    def predict(self, enc, params, values: np.ndarray, H: int) -> np.ndarray:
        n, p, L = values.shape
        flat = values.reshape(n, p * L)
        out = []
        for _ in range(H):
            tape = ad.Tape()
            nodes = {k: tape.constant(v) for k, v in params.items()}
            nxt = self._forward(tape, nodes, flat, enc).value[-1]
            out.append(nxt.reshape(p, L))
            flat = np.vstack([flat, nxt[None]])
        return np.stack(out)

    def __call__(self, train: FunctionalPanel, H: int, start: int) -> np.ndarray:
        enc, params = self.train(train.values)
        return self.predict(enc, params, train.values, H)


def baseline_forecast(data: FunctionalPanel, encoder: str, config: RollingConfig, horizons,
                      baseline: BaselineConfig | None = None) -> ForecastReport:
    base = baseline or BaselineConfig(encoder=encoder)
    if base.encoder != encoder:
        base = BaselineConfig(**{**base.__dict__, "encoder": encoder})
    return rolling_forecast(data, config, horizons, BaselineForecaster(base))
