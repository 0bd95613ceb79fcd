"""Functional panels: CSV ingestion, serialization and synthetic generation.

A panel holds ``values[t, j, k] = Y_tj(u_k)`` for ``n`` periods, ``p``
variables and ``L`` grid points ``u`` in ``[0, 1]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gauss import MatrixNormal, sample_matrix_normal
from .kernels import SpatialKernel, gram

FORMATS = ("long-csv", "wide-csv")
TRANSFORMS = ("none", "log")
DYNAMICS = ("markov-linear", "two-lag", "nonlinear-recurrent")


@dataclass
class FunctionalPanel:
    values: np.ndarray  # n x p x L
    grid: np.ndarray  # L
    times: list = field(default_factory=list)
    variables: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.grid = np.asarray(self.grid, dtype=float).ravel()
        if self.values.ndim != 3:
            raise ValueError("values must be an n x p x L array")
        n, p, L = self.values.shape
        if self.grid.size != L:
            raise ValueError(f"grid has {self.grid.size} points, values have {L}")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("panel contains missing or non-finite values")
        self.times = [str(t) for t in self.times] or [str(t) for t in range(n)]
        self.variables = [str(v) for v in self.variables] or [f"y{j}" for j in range(p)]
        if len(self.times) != n or len(self.variables) != p:
            raise ValueError("label counts do not match the value tensor")

    @property
    def shape(self):
        return self.values.shape

    def slice_time(self, start: int, stop: int) -> "FunctionalPanel":
        return FunctionalPanel(self.values[start:stop], self.grid, self.times[start:stop],
                               self.variables)


def _float(text, where):
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"non-numeric value {text!r} at {where}") from None


def _normalize_grid(points) -> np.ndarray:
    g = np.asarray(points, dtype=float)
    if g.size == 1:
        return np.zeros(1)
    return (g - g[0]) / (g[-1] - g[0])


def load_panel(path, format: str = "long-csv", transform: str = "none") -> FunctionalPanel:
    """Read a panel from CSV.

    ``long-csv`` has columns ``time, variable, gridpoint, value``;
    ``wide-csv`` has ``time, variable`` followed by one column per grid point.
    Times and variables keep their order of first appearance; grid points
    are sorted and mapped affinely onto ``[0, 1]``.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")
    cells: dict[tuple, float] = {}
    times, variables, gridpoints = {}, {}, {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if format == "long-csv":
            if header[:4] != ["time", "variable", "gridpoint", "value"]:
                raise ValueError("long-csv header must be time,variable,gridpoint,value")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                t, var, g, val = (c.strip() for c in row[:4])
                gv = _float(g, f"line {line}, column gridpoint")
                times.setdefault(t, len(times))
                variables.setdefault(var, len(variables))
                gridpoints.setdefault(gv, g)
                if (t, var, gv) in cells:
                    raise ValueError(f"duplicate cell ({t}, {var}, {g}) at line {line}")
                cells[(t, var, gv)] = _float(val, f"line {line}, column value")
        else:
            if header[:2] != ["time", "variable"] or len(header) < 3:
                raise ValueError("wide-csv header must be time,variable,<gridpoints...>")
            cols = [_float(g, f"header column {i + 3}") for i, g in enumerate(header[2:])]
            for gv, g in zip(cols, header[2:]):
                gridpoints.setdefault(gv, g)
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                t, var = row[0].strip(), row[1].strip()
                times.setdefault(t, len(times))
                variables.setdefault(var, len(variables))
                for gv, text, name in zip(cols, row[2:], header[2:]):
                    if text.strip() == "":
                        continue
                    if (t, var, gv) in cells:
                        raise ValueError(f"duplicate cell ({t}, {var}, {name}) at line {line}")
                    cells[(t, var, gv)] = _float(text.strip(), f"line {line}, column {name}")
    grid = sorted(gridpoints)
    values = np.empty((len(times), len(variables), len(grid)))
    missing = []
    for t, ti in times.items():
        for var, vi in variables.items():
            for k, gv in enumerate(grid):
                val = cells.get((t, var, gv))
                if val is None:
                    missing.append(f"({t}, {var}, {gridpoints[gv]})")
                else:
                    values[ti, vi, k] = val
    if missing:
        raise ValueError(f"{len(missing)} missing cells: " + ", ".join(missing))
    if transform == "log":
        if np.any(values <= 0):
            raise ValueError("log transform needs strictly positive values")
        values = np.log(values)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values in panel")
    return FunctionalPanel(values, _normalize_grid(grid), list(times), list(variables))


def write_panel(panel: FunctionalPanel, path, format: str = "long-csv") -> None:
    """Write ``panel`` so that :func:`load_panel` reproduces it exactly."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    n, p, L = panel.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if format == "long-csv":
            w.writerow(["time", "variable", "gridpoint", "value"])
            for t in range(n):
                for j in range(p):
                    for k in range(L):
                        w.writerow([panel.times[t], panel.variables[j], repr(float(panel.grid[k])),
                                    repr(float(panel.values[t, j, k]))])
        else:
            w.writerow(["time", "variable"] + [repr(float(g)) for g in panel.grid])
            for t in range(n):
                for j in range(p):
                    w.writerow([panel.times[t], panel.variables[j]]
                               + [repr(float(x)) for x in panel.values[t, j]])


# ---------------------------------------------------------------- simulation


@dataclass
class SimConfig:
    p: int = 20
    n: int = 40
    L: int = 12
    M0: int = 3
    alpha: float = 5.0
    sigma_eps: float = 0.1
    sigma_a: float = 1.0
    spatial_kind: str = "se"
    spatial_lengthscale: float = 0.2
    spatial_variance: float = 1.0
    dynamic: str = "markov-linear"
    rho: float = 0.8
    nugget: float = 1e-2
    feature_dim: int = 8
    temporal_lengthscale: float = 1.0
    leak: float = 0.3
    force_nonempty: bool = True
    Z: np.ndarray | None = None
    A: np.ndarray | None = None

    def __post_init__(self):
        for name in ("p", "n", "L", "M0"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.dynamic not in DYNAMICS:
            raise ValueError(f"unknown dynamic {self.dynamic!r}; expected one of {DYNAMICS}")
        if self.sigma_eps < 0 or self.sigma_a <= 0 or self.alpha <= 0:
            raise ValueError("sigma_eps must be >= 0, sigma_a and alpha > 0")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if (self.nugget < 0 or self.feature_dim < 1 or self.temporal_lengthscale <= 0
                or not 0 < self.leak <= 1):
            raise ValueError("invalid temporal settings")
        for name in ("Z", "A"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (self.p, self.M0)).copy()
                setattr(self, name, val)
        SpatialKernel(self.spatial_kind, self.spatial_lengthscale, self.spatial_variance)


def sample_ibp(p: int, M: int, alpha: float, rng, force_nonempty: bool = True):
    """Truncated stick-breaking IBP draw: returns ``(Z, w)``."""
    v = rng.beta(alpha, 1.0, size=M)
    w = np.cumprod(v)
    Z = (rng.uniform(size=(p, M)) < w).astype(float)
    if force_nonempty:
        for r in np.flatnonzero(Z.sum(axis=0) == 0):
            Z[rng.integers(p), r] = 1.0
    return Z, w


def _markov_cov(n, rho):
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _sequential_paths(cfg: SimConfig, spatial_cov, rng, kernel_row):
    """Sample factor paths one step at a time from the history-driven GP.

    ``kernel_row(X, t)`` returns covariances ``k(t, s)`` for ``s <= t`` given
    the paths ``X[:t]``; the full matrix is returned for the ground truth.
    """
    n, M, L = cfg.n, cfg.M0, cfg.L
    X = np.zeros((n, M, L))
    C = np.zeros((n, n))
    Fs = np.linalg.cholesky(spatial_cov + 1e-12 * np.eye(L))
    for t in range(n):
        row = kernel_row(X, t)
        C[t, :t + 1] = row
        C[:t + 1, t] = row
        if t == 0:
            mean = np.zeros((M, L))
            var = C[0, 0]
        else:
            Lc, _ = ad.cholesky_factor(C[:t, :t])
            gain = np.linalg.solve(Lc.T, np.linalg.solve(Lc, C[:t, t]))
            mean = np.einsum("s,sml->ml", gain, X[:t])
            var = C[t, t] - C[:t, t] @ gain
        X[t] = mean + np.sqrt(max(var, 0.0)) * rng.standard_normal((M, L)) @ Fs.T
    return X, C


def simulate_factors(cfg: SimConfig, rng: np.random.Generator, grid=None):
    """Factor paths ``X`` (n x M0 x L) and the realized temporal covariance."""
    grid = np.linspace(0.0, 1.0, cfg.L) if grid is None else grid
    spatial = SpatialKernel(cfg.spatial_kind, cfg.spatial_lengthscale, cfg.spatial_variance)
    Su = gram(spatial, grid, grid)
    n, M, L = cfg.n, cfg.M0, cfg.L
    if cfg.dynamic == "markov-linear":
        Sx = _markov_cov(n, cfg.rho)
        dist = MatrixNormal(np.zeros((L, n)), Su, Sx)
        X = np.stack([sample_matrix_normal(dist, rng).T for _ in range(M)], axis=1)
        return X, Sx, {}
    if cfg.dynamic == "two-lag":
        c0, a1, a2 = 0.5, 0.3, 0.2
        scale = 1.0 / (M * L)

        def lag(X, t, d):
            return X[t - d] if t - d >= 0 else np.zeros((M, L))

        def row(X, t):
            out = np.empty(t + 1)
            for s in range(t + 1):
                out[s] = (c0 + a1 * scale * np.sum(lag(X, t, 1) * lag(X, s, 1))
                          + a2 * scale * np.sum(lag(X, t, 2) * lag(X, s, 2)))
            out[t] += cfg.nugget
            return out

        X, Sx = _sequential_paths(cfg, Su, rng, row)
        return X, Sx, {}
    d = cfg.feature_dim
    Wh = rng.standard_normal((d, d))
    Wh *= 0.9 / np.linalg.norm(Wh, 2)
    Wx = rng.standard_normal((M * L, d)) / np.sqrt(M * L)
    b = 0.5 * rng.standard_normal(d)
    H = np.zeros((n, d))

    def row(X, t):
        prev_h = H[t - 1] if t > 0 else np.zeros(d)
        prev_x = X[t - 1].ravel() if t > 0 else np.zeros(M * L)
        H[t] = (1.0 - cfg.leak) * prev_h + cfg.leak * np.tanh(prev_h @ Wh + 2.0 * prev_x @ Wx + b)
        d2 = np.sum((H[:t + 1] - H[t]) ** 2, axis=1)
        out = np.exp(-d2 / (2.0 * cfg.temporal_lengthscale ** 2))
        out[t] += cfg.nugget
        return out

    X, Sx = _sequential_paths(cfg, Su, rng, row)
    return X, Sx, {"features": H.copy(), "W_h": Wh, "W_x": Wx, "b": b}


def simulate_panel(cfg: SimConfig, rng: np.random.Generator):
    """Draw a panel from the generative model; returns ``(panel, truth)``."""
    grid = np.linspace(0.0, 1.0, cfg.L)
    if cfg.Z is not None:
        Z, w = cfg.Z.copy(), None
    else:
        Z, w = sample_ibp(cfg.p, cfg.M0, cfg.alpha, rng, cfg.force_nonempty)
    A = cfg.A.copy() if cfg.A is not None else cfg.sigma_a * rng.standard_normal((cfg.p, cfg.M0))
    X, Sx, extra = simulate_factors(cfg, rng, grid)
    Y = np.einsum("jr,trk->tjk", Z * A, X)
    if cfg.sigma_eps > 0:
        Y = Y + cfg.sigma_eps * rng.standard_normal(Y.shape)
    truth = {"Z": Z, "A": A, "X": X, "sigma_x": Sx, "grid": grid,
             "spatial": SpatialKernel(cfg.spatial_kind, cfg.spatial_lengthscale,
                                      cfg.spatial_variance)}
    if w is not None:
        truth["w"] = w
    truth.update(extra)
    return FunctionalPanel(Y, grid), truth
