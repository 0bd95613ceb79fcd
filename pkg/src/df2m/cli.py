"""Command-line entry point: ``df2m {fit,predict,evaluate,simulate,inspect}``.

Settings come from a flat ``key = value`` file (``--config``), overridden by
``--set key=value`` and the shortcut flags. Failures print one JSON object
to stderr and exit nonzero (2 for configuration errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import DYNAMICS, FORMATS, TRANSFORMS, SimConfig, load_panel, simulate_panel, write_panel
from .evaluate import (MODES, BaselineConfig, BaselineForecaster, Df2mForecaster,
                       GlobalMeanForecaster, RollingConfig, rolling_forecast)
from .model import load_checkpoint, rng_stream, save_checkpoint
from .mtgp import factor_trajectories, predict_path
from .seqnets import ENCODERS
from .trainer import TrainConfig, fit, init_model

COMMANDS = ("fit", "predict", "evaluate", "simulate", "inspect")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ------------------------------------------------------------------ config

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list:
    items = [int(x) for x in text.replace(";", ",").split(",") if x.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return items


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"unknown value {text!r}, expected one of {', '.join(options)}")
        return text
    return parse


TRAIN_KEYS = {
    "encoder": _choice(ENCODERS), "M": int, "K": int, "hidden_size": int, "heads": int,
    "alpha": float, "spatial_kind": _choice(("se", "ou")), "nugget": float, "normalize": _bool,
    "lr_phase1": float, "lr_phase2": float, "phase1_steps": int, "phase2_steps": int,
    "max_iters": int, "refit_iters": _opt_int, "window": int, "tol": float,
    "factor_draws": int, "stick_draws": int, "center": _bool,
}
DATA_KEYS = {"data": str, "format": _choice(FORMATS), "transform": _choice(TRANSFORMS)}
COMMON_KEYS = {"seed": int, "out": str}
EVAL_KEYS = {"horizons": _int_list, "n1": int, "mode": _choice(MODES), "baseline": _bool,
             "baseline_steps": int, "baseline_lr": float}
SIM_KEYS = {
    "p": int, "n": int, "L": int, "M0": int, "alpha": float, "sigma_eps": float,
    "sigma_a": float, "spatial_kind": _choice(("se", "ou")), "spatial_lengthscale": float,
    "spatial_variance": float, "dynamic": _choice(DYNAMICS), "rho": float, "nugget": float,
    "feature_dim": int, "temporal_lengthscale": float, "leak": float, "format": _choice(FORMATS),
}
SCHEMA = {
    "fit": {**COMMON_KEYS, **DATA_KEYS, **TRAIN_KEYS},
    "predict": {**COMMON_KEYS, "checkpoint": str, "horizons": _int_list},
    "evaluate": {**COMMON_KEYS, **DATA_KEYS, **TRAIN_KEYS, **EVAL_KEYS},
    "simulate": {**COMMON_KEYS, **SIM_KEYS},
    "inspect": {**COMMON_KEYS, "checkpoint": str},
}
DEFAULTS = {
    "seed": 0, "out": "df2m-out", "format": "long-csv", "transform": "none",
    "horizons": [1], "mode": "sliding", "baseline": False, "baseline_steps": 500,
    "baseline_lr": 1e-2,
}
REQUIRED = {"fit": ("data",), "predict": ("checkpoint",), "evaluate": ("data", "n1"),
            "simulate": (), "inspect": ("checkpoint",)}
PATH_KEYS = ("data", "checkpoint")


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{lineno}: expected key = value"])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(command: str, raw: dict) -> dict:
    """Parse and validate raw string settings field by field."""
    schema = SCHEMA[command]
    errors, cfg = [], {}
    for key, text in raw.items():
        if key not in schema:
            errors.append(f"{key}: unknown setting for '{command}'")
            continue
        try:
            cfg[key] = schema[key](text) if isinstance(text, str) else text
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    for key in REQUIRED[command]:
        if key not in cfg and not any(e.startswith(f"{key}:") for e in errors):
            errors.append(f"{key}: required")
    for key in PATH_KEYS:
        if key in cfg and not Path(cfg[key]).exists():
            errors.append(f"{key}: path does not exist: {cfg[key]}")
    if errors:
        raise ConfigError(errors)
    for key, val in DEFAULTS.items():
        if key in schema:
            cfg.setdefault(key, val)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kw = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    try:
        return TrainConfig(seed=cfg["seed"], **kw)
    except ValueError as exc:
        raise ConfigError(str(exc).split("; ")) from None


# ----------------------------------------------------------------- outputs

class Outputs:
    """Declares output files up front; refuses to overwrite without --force."""

    def __init__(self, out_dir, names, force: bool):
        self.dir = Path(out_dir)
        self.paths = {n: self.dir / n for n in names}
        existing = [str(p) for p in self.paths.values() if p.exists()]
        if existing and not force:
            raise ConfigError([f"out: refusing to overwrite {', '.join(existing)} (use --force)"])
        self.dir.mkdir(parents=True, exist_ok=True)

    def __getitem__(self, name):
        return self.paths[name]


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x) -> str:
    return repr(float(x))


def _load_data(cfg):
    return load_panel(cfg["data"], cfg["format"], cfg["transform"])


# ---------------------------------------------------------------- commands

def cmd_fit(cfg, force):
    out = Outputs(cfg["out"], ["checkpoint.df2m", "elbo_trace.csv"], force)
    panel = _load_data(cfg)
    tc = train_config(cfg)
    model, trace = fit(init_model(panel, tc), panel, tc)
    model.meta.update(times=panel.times, variables=panel.variables, stop_reason=trace.stop_reason)
    save_checkpoint(model, out["checkpoint.df2m"], asdict(tc))
    trace.write_csv(out["elbo_trace.csv"])
    return {"checkpoint": str(out["checkpoint.df2m"]), "iterations": len(trace),
            "stop_reason": trace.stop_reason}


def cmd_predict(cfg, force):
    out = Outputs(cfg["out"], ["forecast.csv"], force)
    model, _ = load_checkpoint(cfg["checkpoint"])
    H = max(cfg["horizons"])
    path = predict_path(model, horizon=H)
    variables = model.meta.get("variables") or [f"y{j}" for j in range(model.p)]
    rows = [[h, variables[j], _f(model.grid[k]), _f(path[h - 1, j, k])]
            for h in sorted(set(cfg["horizons"])) for j in range(model.p) for k in range(model.L)]
    _write_rows(out["forecast.csv"], ["horizon", "variable", "gridpoint", "value"], rows)
    return {"forecast": str(out["forecast.csv"])}


def cmd_evaluate(cfg, force):
    out = Outputs(cfg["out"], ["report.json", "windows.csv"], force)
    panel = _load_data(cfg)
    tc = train_config(cfg)
    try:
        rc = RollingConfig(cfg["n1"], cfg["mode"])
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    horizons = cfg["horizons"]
    reports = [rolling_forecast(panel, rc, horizons, Df2mForecaster(tc)),
               rolling_forecast(panel, rc, horizons, GlobalMeanForecaster())]
    if cfg["baseline"]:
        bc = BaselineConfig(tc.encoder, tc.hidden_size, tc.heads, cfg["baseline_steps"],
                            cfg["baseline_lr"], cfg["seed"])
        reports.append(rolling_forecast(panel, rc, horizons, BaselineForecaster(bc)))
    doc = {"config": {"n1": rc.n1, "mode": rc.mode, "horizons": sorted(set(horizons)),
                      "train": asdict(tc)},
           "models": {r.model: r.summary() for r in reports}}
    out["report.json"].write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    rows = []
    for r in reports:
        tmp = out.dir / ".windows.tmp"
        r.write_csv(tmp, panel.times)
        rows.extend(list(csv.reader(tmp.read_text().splitlines()))[1:])
        tmp.unlink()
    _write_rows(out["windows.csv"],
                ["model", "horizon", "window", "target_index", "target_time", "mape", "mspe"], rows)
    return {"report": str(out["report.json"])}


def cmd_simulate(cfg, force):
    fmt = cfg.get("format", "long-csv")
    out = Outputs(cfg["out"], ["panel.csv", "truth.json"], force)
    kw = {k: cfg[k] for k in SIM_KEYS if k in cfg and k != "format"}
    try:
        sc = SimConfig(**kw)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    panel, truth = simulate_panel(sc, rng_stream(cfg["seed"], "sampling"))
    write_panel(panel, out["panel.csv"], fmt)
    doc = {"config": {k: v for k, v in asdict(sc).items() if k not in ("Z", "A")},
           "seed": cfg["seed"], "format": fmt}
    for key, val in truth.items():
        if isinstance(val, np.ndarray):
            doc[key] = {"shape": list(val.shape), "values": [float(x) for x in val.ravel()]}
        elif key == "spatial":
            doc[key] = asdict(val)
    out["truth.json"].write_text(json.dumps(doc, sort_keys=True) + "\n")
    return {"panel": str(out["panel.csv"]), "truth": str(out["truth.json"])}


def cmd_inspect(cfg, force):
    out = Outputs(cfg["out"], ["loadings.csv", "factors.csv", "sigma_x.csv"], force)
    model, _ = load_checkpoint(cfg["checkpoint"])
    q = model.loading_posterior()
    w = q.expected_sticks()
    variables = model.meta.get("variables") or [f"y{j}" for j in range(model.p)]
    times = model.meta.get("times") or [str(t) for t in range(model.n)]
    _write_rows(out["loadings.csv"], ["variable", "factor", "m", "eta", "expected_w"],
                [[variables[j], r, _f(q.m[j, r]), _f(q.eta[j, r]), _f(w[r])]
                 for j in range(model.p) for r in range(model.M)])
    X = factor_trajectories(model)
    _write_rows(out["factors.csv"], ["time", "factor", "gridpoint", "value"],
                [[times[t], r, _f(model.grid[k]), _f(X[t, r, k])]
                 for t in range(model.n) for r in range(model.M) for k in range(model.L)])
    S = model.sigma_x()
    _write_rows(out["sigma_x.csv"], ["time"] + list(times),
                [[times[t]] + [_f(x) for x in S[t]] for t in range(model.n)])
    return {"loadings": str(out["loadings.csv"])}


HANDLERS = {"fit": cmd_fit, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "simulate": cmd_simulate, "inspect": cmd_inspect}


# -------------------------------------------------------------------- main

def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="df2m", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value settings file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("fit", "evaluate"):
            s.add_argument("--data")
            s.add_argument("--encoder")
        if name in ("predict", "inspect"):
            s.add_argument("--checkpoint")
        if name in ("predict", "evaluate"):
            s.add_argument("--horizons")
    return p


def _fail(kind: str, message: str, fields=None, code: int = 1) -> int:
    doc = {"error": kind, "message": message}
    if fields:
        doc["fields"] = fields
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    try:
        raw = read_config_file(args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        for key in ("out", "seed", "data", "encoder", "checkpoint", "horizons"):
            val = getattr(args, key, None)
            if val is not None:
                raw[key] = val
        cfg = build_config(args.command, raw)
        result = HANDLERS[args.command](cfg, args.force)
    except ConfigError as exc:
        return _fail("config", str(exc), exc.errors, code=2)
    except Exception as exc:  # runtime failures keep the module's message
        return _fail(type(exc).__name__, str(exc))
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
