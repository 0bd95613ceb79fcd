"""The composed factor model and its parameter layout.

Unconstrained parameters live in two dictionaries so the trainer can freeze
either group:

``variational``
    ``mu``       (M*n) x K, row ``r*n + t`` is the inducing mean ``mu_tr``
    ``chol``     K x (M*n*K), block ``r*n + t`` is the raw Cholesky factor of
                 ``S_tr`` (strict lower part as is, diagonal via softplus)
    ``tau1``, ``tau0``  1 x M, softplus -> Beta parameters
    ``m``        p x M logits of the Bernoulli means
    ``eta``      p x M loading means
    ``sigma_q``  p x M, softplus -> loading stddevs
    ``sigma_eps``, ``sigma_a``, ``ls``, ``var``  1 x 1, softplus

``encoder``
    weights of :mod:`df2m.seqnets`.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from .ibp import LoadingPosterior
from .kernels import SpatialKernel, TemporalKernel, gram, temporal_gram
from .seqnets import EncoderConfig, encode_np


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def chol_masks(K: int, blocks: int):
    lower = np.tile(np.tril(np.ones((K, K)), -1), (1, blocks))
    diag = np.tile(np.eye(K), (1, blocks))
    return lower, diag


@dataclass
class InducingGrid:
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).ravel()
        if self.v.size < 2 or np.any(np.diff(self.v) <= 0):
            raise ValueError("inducing points must be strictly increasing, K >= 2")

    @classmethod
    def uniform(cls, K: int = 10):
        return cls(np.linspace(0.0, 1.0, K))


@dataclass
class InducingPosterior:
    mu: np.ndarray  # n x M x K
    S_chol: np.ndarray  # n x M x K x K, lower triangular

    @property
    def S(self) -> np.ndarray:
        return np.einsum("tmij,tmkj->tmik", self.S_chol, self.S_chol)


@dataclass
class Df2mModel:
    grid: np.ndarray
    inducing: np.ndarray
    M: int
    spatial_kind: str
    temporal: TemporalKernel
    encoder: EncoderConfig
    alpha: float
    variational: dict
    encoder_params: dict
    offset: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.variational["mu"].shape[0] // self.M

    @property
    def K(self) -> int:
        return self.inducing.size

    @property
    def p(self) -> int:
        return self.variational["m"].shape[0]

    @property
    def L(self) -> int:
        return self.grid.size

    def copy(self) -> "Df2mModel":
        return Df2mModel(
            grid=self.grid.copy(), inducing=self.inducing.copy(), M=self.M,
            spatial_kind=self.spatial_kind, temporal=self.temporal, encoder=self.encoder,
            alpha=self.alpha,
            variational={k: v.copy() for k, v in self.variational.items()},
            encoder_params={k: v.copy() for k, v in self.encoder_params.items()},
            offset=self.offset.copy(), meta=dict(self.meta),
        )

    # ---- constrained views -------------------------------------------------

    def scalar(self, name: str) -> float:
        return float(softplus(self.variational[name][0, 0]))

    @property
    def sigma_eps(self) -> float:
        return self.scalar("sigma_eps")

    @property
    def spatial(self) -> SpatialKernel:
        return SpatialKernel(self.spatial_kind, self.scalar("ls"), self.scalar("var"))

    def loading_posterior(self) -> LoadingPosterior:
        v = self.variational
        return LoadingPosterior(
            tau1=softplus(v["tau1"]).ravel(), tau0=softplus(v["tau0"]).ravel(),
            m=special.expit(v["m"]), eta=v["eta"].copy(), sigma_q=softplus(v["sigma_q"]),
            alpha=self.alpha, sigma_a=self.scalar("sigma_a"),
        )

    def chol_blocks(self) -> np.ndarray:
        lower, diag = chol_masks(self.K, self.M * self.n)
        raw = self.variational["chol"]
        return raw * lower + softplus(raw) * diag

    def inducing_posterior(self) -> InducingPosterior:
        n, M, K = self.n, self.M, self.K
        mu = self.variational["mu"].reshape(M, n, K).transpose(1, 0, 2)
        blocks = self.chol_blocks().reshape(K, M, n, K).transpose(2, 1, 0, 3)
        return InducingPosterior(mu=mu.copy(), S_chol=blocks.copy())

    def inducing_means(self) -> np.ndarray:
        """n x M x K."""
        return self.variational["mu"].reshape(self.M, self.n, self.K).transpose(1, 0, 2)

    # ---- temporal side -----------------------------------------------------

    def history(self, means: np.ndarray | None = None) -> np.ndarray:
        """Encoder inputs: row t holds the inducing means at t-1 (zeros at t=0)."""
        if means is None:
            means = self.inducing_means()
        N = means.shape[0]
        flat = means.reshape(N, -1)
        return np.vstack([np.zeros((1, flat.shape[1])), flat[:-1]])

    def features(self, history: np.ndarray | None = None) -> np.ndarray:
        if history is None:
            history = self.history()
        return encode_np(self.encoder_params, history, self.encoder)

    def sigma_x(self, history: np.ndarray | None = None) -> np.ndarray:
        """Temporal prior covariance including the nugget."""
        K = temporal_gram(self.features(history), self.temporal)
        return K + self.temporal.nugget * np.eye(K.shape[0])

    def spatial_blocks(self, u=None):
        """(Sigma_uu, Sigma_uv, Sigma_vv) at observation points ``u``."""
        u = self.grid if u is None else np.asarray(u, dtype=float)
        k = self.spatial
        return gram(k, u, u), gram(k, u, self.inducing), gram(k, self.inducing, self.inducing)


def param_nodes(tape: ad.Tape, params: dict, trainable: bool) -> dict:
    make = tape.variable if trainable else tape.constant
    return {k: make(v) for k, v in params.items()}


# ---------------------------------------------------------------- checkpoint

MAGIC = b"DF2M"
VERSION = 1


def save_checkpoint(model: Df2mModel, path, config: dict | None = None) -> None:
    """Write the model as ``MAGIC | u32 version | u64 header length | JSON | data``.

    The JSON header lists every array (group, name, shape, byte offset into
    the data section); arrays are stored as little-endian float64, C order.
    """
    arrays, blobs, offset = [], [], 0
    groups = [("variational", model.variational), ("encoder", model.encoder_params),
              ("model", {"grid": model.grid, "inducing": model.inducing, "offset": model.offset})]
    for group, params in groups:
        for name in sorted(params):
            a = np.ascontiguousarray(params[name], dtype="<f8")
            arrays.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = {
        "format": "df2m-checkpoint", "version": VERSION, "M": model.M,
        "spatial_kind": model.spatial_kind, "alpha": model.alpha,
        "temporal": asdict(model.temporal), "encoder": asdict(model.encoder),
        "meta": model.meta, "config": config or {}, "arrays": arrays,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[Df2mModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, config)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a DF2M checkpoint")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    body = data[16 + hlen:]
    groups: dict[str, dict] = {"variational": {}, "encoder": {}, "model": {}}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=int))
        a = np.frombuffer(body, dtype="<f8", count=count, offset=spec["offset"])
        groups[spec["group"]][spec["name"]] = a.reshape(spec["shape"]).astype(float)
    m = groups["model"]
    model = Df2mModel(
        grid=m["grid"], inducing=m["inducing"], M=int(header["M"]),
        spatial_kind=header["spatial_kind"], temporal=TemporalKernel(**header["temporal"]),
        encoder=EncoderConfig(**header["encoder"]), alpha=float(header["alpha"]),
        variational=groups["variational"], encoder_params=groups["encoder"],
        offset=m["offset"], meta=header["meta"],
    )
    return model, header["config"]
