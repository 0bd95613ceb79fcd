"""Spatial kernels on the observation interval and the deep temporal kernel.

Both kinds act on rows of a point matrix:

* squared exponential: ``var * exp(-|a - b|^2 / (2 l^2))``
* Ornstein-Uhlenbeck: ``var * exp(-|a - b| / l)``

The temporal kernel applies the same forms to encoder features ``h_t``, so
``Sigma_X[t, s] = k(h_t, h_s)``. Row ``t`` of the feature matrix summarizes
the factor history strictly before ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

KINDS = ("se", "ou")


@dataclass
class SpatialKernel:
    kind: str = "se"
    lengthscale: float = 0.2
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ValueError("kernel hyperparameters must be positive")


@dataclass
class TemporalKernel:
    kind: str = "se"
    lengthscale: float | None = None  # None -> sqrt(feature dim)
    variance: float = 1.0
    normalize: bool = False
    nugget: float = 1e-2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.lengthscale is not None and self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.variance <= 0 or self.nugget < 0:
            raise ValueError("variance must be positive and nugget nonnegative")

    def lengthscale_for(self, d: int) -> float:
        return float(np.sqrt(d)) if self.lengthscale is None else self.lengthscale


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def kernel_nodes(kind, lengthscale, variance, a, b) -> ad.Node:
    """Gram matrix on the tape; ``lengthscale`` and ``variance`` may be nodes."""
    d2 = ad.sqdist(a, b) if isinstance(a, ad.Node) or isinstance(b, ad.Node) else None
    if d2 is None:
        tape = next(x.tape for x in (lengthscale, variance) if isinstance(x, ad.Node))
        d2 = tape.constant(_sqdist_np(_points(a), _points(b)))
    if kind == "se":
        return variance * ad.exp(d2 / (-2.0 * lengthscale * lengthscale))
    if kind == "ou":
        return variance * ad.exp(-ad.sqrt(d2) / lengthscale)
    raise ValueError(f"unknown kernel kind {kind!r}")


def _sqdist_np(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kernel_np(kind, ls, var, a, b):
    d2 = _sqdist_np(_points(a), _points(b))
    if kind == "se":
        return var * np.exp(-d2 / (2.0 * ls * ls))
    return var * np.exp(-np.sqrt(d2) / ls)


def gram(kernel: SpatialKernel, a, b) -> np.ndarray:
    return _kernel_np(kernel.kind, kernel.lengthscale, kernel.variance, a, b)


def temporal_gram(features, kernel: TemporalKernel):
    """n x n temporal covariance from encoder features (array or node).

    No nugget is added here; models add ``kernel.nugget`` before factorizing.
    """
    if isinstance(features, ad.Node):
        if not np.all(np.isfinite(features.value)):
            raise FloatingPointError("non-finite encoder features")
        ls = kernel.lengthscale_for(features.shape[1])
        return kernel_nodes(kernel.kind, ls, kernel.variance, features, features)
    h = _points(features)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite encoder features")
    ls = kernel.lengthscale_for(h.shape[1])
    return _kernel_np(kernel.kind, ls, kernel.variance, h, h)


def cross_temporal(h_new, h, kernel: TemporalKernel) -> np.ndarray:
    """k(h_new_i, h_s) for prediction; rows of ``h_new`` against rows of ``h``."""
    h = _points(h)
    ls = kernel.lengthscale_for(h.shape[1])
    return _kernel_np(kernel.kind, ls, kernel.variance, _points(h_new), h)


def spectral_norm(W: np.ndarray, iters: int = 30, tol: float = 1e-6) -> float:
    """Largest singular value by power iteration."""
    if not np.any(W):
        return 0.0
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    # a deterministic start can be orthogonal to the top singular vector
    v += 1e-3 * np.cos(np.arange(W.shape[1]) + 1.0)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = W @ v
        u /= np.linalg.norm(u)
        v = W.T @ u
        new = np.linalg.norm(v)
        v /= new
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(sigma)


def spectral_normalize(weights):
    """Divide each matrix by its largest singular value; zero matrices pass through."""
    out = []
    for W in weights:
        W = np.asarray(W, dtype=float)
        s = spectral_norm(W)
        out.append(W / s if s > 0 else W.copy())
    return out
