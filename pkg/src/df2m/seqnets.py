"""Sequential encoders built on the autodiff tape.

Row ``t`` of an input matrix is the encoder input at step ``t``; every
encoder is causal, so output row ``t`` only sees input rows ``<= t``.
Weights follow the row-vector convention ``y = x @ W + b`` and recurrent
gates act on the stacked vector ``[h_{t-1}, x_t]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import spectral_normalize

ENCODERS = ("lin", "lstm", "gru", "attn")


@dataclass
class EncoderConfig:
    kind: str = "lstm"
    input_dim: int = 1
    hidden_size: int = 15
    layers: int = 1
    heads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENCODERS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODERS}")
        if self.hidden_size < 1 or self.input_dim < 1:
            raise ValueError("hidden_size and input_dim must be positive")
        if self.layers != 1:
            raise ValueError("only single-layer encoders are supported")
        if self.heads < 1 or self.hidden_size % self.heads:
            raise ValueError("heads must divide hidden_size")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: EncoderConfig, rng: np.random.Generator, readout: int = 0):
    """Initial weights: input dense layer, the core encoder, optional zero readout."""
    H, d = config.hidden_size, config.input_dim
    p = {"in_W": _uniform(rng, d, (d, H)), "in_b": _uniform(rng, d, (1, H))}
    if config.kind == "lin":
        p["W"] = _uniform(rng, H, (H, H))
        p["b"] = _uniform(rng, H, (1, H))
    elif config.kind == "lstm":
        for g in ("f", "i", "C", "o"):
            p[f"W_{g}"] = _uniform(rng, 2 * H, (2 * H, H))
        for g in ("f", "i", "c", "o"):
            p[f"b_{g}"] = _uniform(rng, 2 * H, (1, H))
    elif config.kind == "gru":
        for g in ("z", "r", "h"):
            p[f"W_{g}"] = _uniform(rng, 2 * H, (2 * H, H))
            p[f"b_{g}"] = _uniform(rng, 2 * H, (1, H))
    else:
        for g in ("Q", "K", "V", "O"):
            p[f"W_{g}"] = _uniform(rng, H, (H, H))
        p["b_O"] = _uniform(rng, H, (1, H))
    if readout:
        p["out_W"] = np.zeros((H, readout))
        p["out_b"] = np.zeros((1, readout))
    return p


def weight_names(params) -> list[str]:
    """Matrices subject to spectral normalization (the readout is excluded)."""
    return [k for k in params if (k.startswith("W") or k == "in_W")]


def normalize_weights(params: dict) -> dict:
    names = weight_names(params)
    out = dict(params)
    for k, W in zip(names, spectral_normalize([params[k] for k in names])):
        out[k] = W
    return out


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _check_finite(node, what, t=None):
    bad = ~np.isfinite(node.value)
    if bad.any():
        if t is None:
            t = int(np.argwhere(bad)[0][0])
        raise FloatingPointError(f"non-finite {what} at time index {t}")


def forward_lin(params, inputs) -> ad.Node:
    """Time-invariant dense + ReLU; row ``t`` depends on input row ``t`` only."""
    return ad.relu(inputs @ params["W"] + params["b"])


def forward_lstm(params, inputs) -> ad.Node:
    n = inputs.shape[0]
    H = params["W_f"].shape[1]
    W = ad.concat([params[f"W_{g}"] for g in ("f", "i", "C", "o")], axis=1)
    b = ad.concat([params[f"b_{g}"] for g in ("f", "i", "c", "o")], axis=1)
    Wh, Wx = W[:H, :], W[H:, :]
    pre = inputs @ Wx + b
    tape = pre.tape
    h = tape.constant(np.zeros((1, H)))
    c = tape.constant(np.zeros((1, H)))
    rows = []
    for t in range(n):
        z = pre[t] + h @ Wh
        f = ad.sigmoid(z[:, 0:H])
        i = ad.sigmoid(z[:, H:2 * H])
        c_in = ad.tanh(z[:, 2 * H:3 * H])
        c = f * c + i * c_in
        o = ad.sigmoid(z[:, 3 * H:])
        h = o * ad.tanh(c)
        _check_finite(h, "LSTM state", t)
        rows.append(h)
    return ad.concat(rows, axis=0)


def forward_gru(params, inputs) -> ad.Node:
    n = inputs.shape[0]
    H = params["W_z"].shape[1]
    Wzr = ad.concat([params["W_z"], params["W_r"]], axis=1)
    bzr = ad.concat([params["b_z"], params["b_r"]], axis=1)
    pre_zr = inputs @ Wzr[H:, :] + bzr
    Wzr_h = Wzr[:H, :]
    pre_h = inputs @ params["W_h"][H:, :] + params["b_h"]
    Wh_h = params["W_h"][:H, :]
    h = pre_zr.tape.constant(np.zeros((1, H)))
    rows = []
    for t in range(n):
        zr = ad.sigmoid(pre_zr[t] + h @ Wzr_h)
        z, r = zr[:, :H], zr[:, H:]
        h_tilde = ad.tanh(pre_h[t] + (r * h) @ Wh_h)
        h = (1.0 - z) * h + z * h_tilde
        _check_finite(h, "GRU state", t)
        rows.append(h)
    return ad.concat(rows, axis=0)


def forward_attention(params, inputs, heads: int = 1, return_weights: bool = False):
    """Causal self-attention: step ``t`` attends to steps ``s <= t`` only."""
    n = inputs.shape[0]
    q = inputs @ params["W_Q"]
    k = inputs @ params["W_K"]
    v = inputs @ params["W_V"]
    H = q.shape[1]
    dk = H // heads
    mask = np.tril(np.ones((n, n), dtype=bool))
    outs, weights = [], []
    for j in range(heads):
        cols = slice(j * dk, (j + 1) * dk)
        logits = (q[:, cols] @ ad.transpose(k[:, cols])) * (1.0 / np.sqrt(dk))
        _check_finite(logits, "attention logits")
        a = ad.softmax_rows(logits, mask)
        outs.append(a @ v[:, cols])
        weights.append(a)
    h = outs[0] if heads == 1 else ad.concat(outs, axis=1)
    out = h @ params["W_O"] + params["b_O"]
    if return_weights:
        return out, weights[0] if heads == 1 else weights, h
    return out


CORES = {"lin": forward_lin, "lstm": forward_lstm, "gru": forward_gru}


def encode(params, inputs: np.ndarray, config: EncoderConfig) -> ad.Node:
    """Layer norm -> dense + ReLU -> core encoder. ``params`` are tape nodes."""
    tape = next(iter(params.values())).tape
    x = tape.constant(layer_norm(inputs))
    z = ad.relu(x @ params["in_W"] + params["in_b"])
    if config.kind == "attn":
        return forward_attention(params, z, heads=config.heads)
    return CORES[config.kind](params, z)


def encode_np(params: dict, inputs: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Forward pass with plain arrays (no gradients needed)."""
    tape = ad.Tape()
    nodes = {k: tape.constant(v) for k, v in params.items()}
    return encode(nodes, inputs, config).value
