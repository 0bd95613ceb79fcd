"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A :class:`Tape` records nodes in construction order (define-by-run). Every
operation returns a new :class:`Node`; :func:`backward` walks the tape in
reverse and accumulates adjoints.

    >>> tape = Tape()
    >>> x = tape.variable(3.0)
    >>> y = x * x
    >>> float(backward(y, [x])[x][0, 0])
    6.0
"""
from __future__ import annotations

import itertools
import logging

import numpy as np
import scipy.linalg as sla
from scipy import special

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class ShapeError(ValueError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix stays non-positive-definite after jitter."""

    def __init__(self, minor: int, msg: str = ""):
        self.minor = minor
        super().__init__(msg or f"matrix not positive definite (leading minor {minor})")


class Node:
    __slots__ = ("id", "value", "op", "parents", "tape", "_vjp", "__weakref__")

    __array_priority__ = 1000  # so ndarray (op) Node dispatches to Node

    def __init__(self, tape, value, op, parents=(), vjp=None):
        self.tape = tape
        self.id = next(tape._ids)
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self._vjp = vjp
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Owns the nodes of one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids = itertools.count()

    def variable(self, value) -> Node:
        return Node(self, _as_matrix(value), "leaf")

    def constant(self, value) -> Node:
        return Node(self, _as_matrix(value), "const")

    def forward(self, op: str, inputs, **kwargs) -> Node:
        """Apply the operation named ``op`` to ``inputs``."""
        try:
            fn = OPS[op]
        except KeyError:
            raise ValueError(f"unknown operation {op!r}") from None
        return fn(*[self._lift(x) for x in inputs], **kwargs)

    def _lift(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to another tape")
            return x
        return self.constant(x)


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a scalar or 2-D array, got shape {arr.shape}")
    return arr


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands come from different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a Node")
    return tape


def _lift(tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return Node(tape, a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return Node(tape, a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return Node(tape, av * bv, "mul", (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return Node(tape, out, "div", (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape),
                           _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Node) -> Node:
    return Node(a.tape, -a.value, "neg", (a,), lambda g: (-g,))


def _unary(name, f, df):
    def op(a: Node) -> Node:
        x = a.value
        y = f(x)
        return Node(a.tape, y, name, (a,), lambda g: (g * df(x, y),))

    op.__name__ = name
    return op


exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
log1p = _unary("log1p", np.log1p, lambda x, y: 1.0 / (1.0 + x))
sigmoid = _unary("sigmoid", special.expit, lambda x, y: y * (1.0 - y))
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float))
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: special.expit(x))
square = _unary("square", np.square, lambda x, y: 2.0 * x)
gammaln = _unary("gammaln", special.gammaln, lambda x, y: special.digamma(x))
digamma = _unary("digamma", special.digamma, lambda x, y: special.polygamma(1, x))


def sqrt(a: Node) -> Node:
    """Square root whose derivative is taken as zero at the origin."""
    x = a.value
    y = np.sqrt(x)
    with np.errstate(divide="ignore"):
        d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
    return Node(a.tape, y, "sqrt", (a,), lambda g: (g * d,))


def clip(a: Node, lo=-np.inf, hi=np.inf) -> Node:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return Node(a.tape, np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- structural


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Node(tape, av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    return Node(a.tape, a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    out = a.value.reshape(shape)
    if out.ndim != 2:
        raise ShapeError("reshape target must be 2-D")
    return Node(a.tape, out, "reshape", (a,), lambda g: (g.reshape(old),))


def permute(a: Node, shape3, axes, out_shape) -> Node:
    """View ``a`` as a 3-D array ``shape3``, transpose by ``axes``, flatten to ``out_shape``."""
    old = a.shape
    inv = np.argsort(axes)
    moved = tuple(shape3[i] for i in axes)
    out = a.value.reshape(shape3).transpose(axes).reshape(out_shape)
    return Node(a.tape, out, "permute", (a,),
                lambda g: (g.reshape(moved).transpose(inv).reshape(old),))


def sum_(a: Node, axis=None) -> Node:
    x = a.value
    if axis is None:
        return Node(a.tape, np.array([[x.sum()]]), "sum", (a,),
                    lambda g: (np.full(x.shape, g[0, 0]),))
    out = x.sum(axis=axis, keepdims=True)
    return Node(a.tape, out, "sum", (a,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def trace(a: Node) -> Node:
    if a.shape[0] != a.shape[1]:
        raise ShapeError("trace of non-square matrix")
    n = a.shape[0]
    return Node(a.tape, np.array([[np.trace(a.value)]]), "trace", (a,),
                lambda g: (g[0, 0] * np.eye(n),))


def diag(a: Node) -> Node:
    """Diagonal of a square matrix as a column vector."""
    if a.shape[0] != a.shape[1]:
        raise ShapeError("diag of non-square matrix")
    n = a.shape[0]
    return Node(a.tape, np.diag(a.value).reshape(n, 1).copy(), "diag", (a,),
                lambda g: (np.diag(g[:, 0]),))


def slice_(a: Node, key) -> Node:
    if not isinstance(key, tuple):
        key = (key, slice(None))
    key = tuple(slice(k, k + 1) if isinstance(k, (int, np.integer)) else k for k in key)
    shape = a.shape
    out = a.value[key]
    if out.ndim != 2:
        raise ShapeError("slice must keep two dimensions")

    def vjp(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return Node(a.tape, out.copy(), "slice", (a,), vjp)


def concat(nodes, axis=0) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_lift(tape, x) for x in nodes]
    try:
        out = np.concatenate([x.value for x in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum([x.shape[axis] for x in nodes])[:-1]
    return Node(tape, out, "concat", nodes, lambda g: tuple(np.split(g, cuts, axis=axis)))


def softmax_rows(a: Node, mask=None) -> Node:
    """Row-wise softmax; entries where ``mask`` is False get probability zero."""
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Node(a.tape, y, "softmax", (a,), vjp)


def sqdist(a, b) -> Node:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: feature dims differ {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        ga = 2.0 * np.einsum("ij,ijk->ik", g, diff)
        gb = -2.0 * np.einsum("ij,ijk->jk", g, diff)
        return ga, gb

    return Node(tape, out, "sqdist", (a, b), vjp)


# ------------------------------------------------------------- linear algebra


def cholesky_factor(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with escalating jitter.

    Returns ``(L, jitter)``; jitter starts at 1e-8 times the mean diagonal and
    doubles up to 1e-4 times it.
    """
    A = 0.5 * (A + A.T)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.abs(np.diag(A)))) or 1.0
    eye = np.eye(A.shape[0])
    jit = JITTER_START
    while jit <= JITTER_MAX * (1 + 1e-12):
        try:
            L = np.linalg.cholesky(A + jit * scale * eye)
            logger.debug("cholesky needed jitter %.3g", jit * scale)
            return L, jit * scale
        except np.linalg.LinAlgError:
            jit *= 2.0
    raise CholeskyError(_failing_minor(A))


def _failing_minor(A):
    for k in range(1, A.shape[0] + 1):
        try:
            np.linalg.cholesky(A[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return A.shape[0]


def _phi(X):
    out = np.tril(X)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a: Node) -> Node:
    if a.shape[0] != a.shape[1]:
        raise ShapeError("cholesky of non-square matrix")
    if not np.allclose(a.value, a.value.T, rtol=1e-10, atol=1e-12):
        raise ShapeError("cholesky input is not symmetric")
    L, _ = cholesky_factor(a.value)

    def vjp(g):
        P = _phi(L.T @ np.tril(g))
        S = sla.solve_triangular(L, sla.solve_triangular(L, P.T, lower=True, trans=1).T,
                                 lower=True, trans=1)
        return (0.5 * (S + S.T),)

    return Node(a.tape, L, "cholesky", (a,), vjp)


def solve_triangular(L, B, lower=True, trans=False) -> Node:
    """Solve ``L X = B`` (or ``L^T X = B`` with ``trans``) for triangular ``L``."""
    tape = _tape_of(L, B)
    L, B = _lift(tape, L), _lift(tape, B)
    if L.shape[0] != L.shape[1] or L.shape[1] != B.shape[0]:
        raise ShapeError(f"solve_triangular: shapes {L.shape} and {B.shape}")
    Lv = L.value
    X = sla.solve_triangular(Lv, B.value, lower=lower, trans=int(trans))
    tri = np.tril if lower else np.triu

    def vjp(g):
        gB = sla.solve_triangular(Lv, g, lower=lower, trans=int(not trans))
        gL = -(X @ gB.T) if trans else -(gB @ X.T)
        return tri(gL), gB

    return Node(tape, X, "solve_triangular", (L, B), vjp)


def logdet(a: Node) -> Node:
    """log|A| for symmetric positive-definite ``A`` via its Cholesky factor."""
    L = cholesky(a)
    return 2.0 * sum_(log(diag(L)))


def cho_solve(L: Node, B) -> Node:
    """``(L L^T)^{-1} B``."""
    return solve_triangular(L, solve_triangular(L, B), trans=True)


# ---------------------------------------------------------------- statistics


def _beta_cdf_grads(v, a, b, rel=1e-6):
    ha = rel * np.maximum(a, 1.0)
    hb = rel * np.maximum(b, 1.0)
    dIa = (special.betainc(a + ha, b, v) - special.betainc(a - ha, b, v)) / (2 * ha)
    dIb = (special.betainc(a, b + hb, v) - special.betainc(a, b - hb, v)) / (2 * hb)
    logpdf = (a - 1) * np.log(v) + (b - 1) * np.log1p(-v) - special.betaln(a, b)
    pdf = np.exp(logpdf)
    return -dIa / pdf, -dIb / pdf


def beta_icdf(a: Node, b: Node, u) -> Node:
    """Reparameterized Beta draws ``v = I^{-1}(u; a, b)``.

    ``a`` and ``b`` are 1 x M nodes; ``u`` is an S x M array of uniforms held
    fixed. Gradients use the implicit function theorem on the regularized
    incomplete beta function.
    """
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    u = np.asarray(u, dtype=float)
    av = np.broadcast_to(a.value, u.shape)
    bv = np.broadcast_to(b.value, u.shape)
    v = special.betaincinv(av, bv, u)
    v = np.clip(v, 1e-300, 1.0)

    def vjp(g):
        inner = (v > 1e-300) & (v < 1.0)
        vc = np.clip(v, 1e-300, 1 - 1e-16)
        da, db = _beta_cdf_grads(vc, av, bv)
        da = np.where(inner, da, 0.0)
        db = np.where(inner, db, 0.0)
        return (g * da).sum(axis=0, keepdims=True), (g * db).sum(axis=0, keepdims=True)

    return Node(tape, v, "beta_icdf", (a, b), vjp)


OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "log1p": log1p, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "softplus": softplus, "square": square, "sqrt": sqrt,
    "gammaln": gammaln, "digamma": digamma, "clip": clip,
    "matmul": matmul, "transpose": transpose, "reshape": reshape, "permute": permute,
    "sum": sum_, "mean": mean, "trace": trace, "diag": diag, "slice": slice_,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "softmax": softmax_rows, "sqdist": sqdist, "cholesky": cholesky,
    "solve_triangular": solve_triangular, "logdet": logdet, "beta_icdf": beta_icdf,
}


# ------------------------------------------------------------------ backward


def backward(output: Node, wrt) -> dict[Node, np.ndarray]:
    """Adjoints of the scalar ``output`` with respect to each node in ``wrt``.

    Nodes on the same tape that do not influence ``output`` get zero adjoints.
    """
    if output.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 output, got {output.shape}")
    tape = output.tape
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Node) or w.tape is not tape:
            raise ValueError(f"{w!r} is not a node of this graph")

    grads: dict[int, np.ndarray] = {output.id: np.ones((1, 1))}
    for node in reversed(tape.nodes[: output.id + 1]):
        g = grads.get(node.id)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if parent.op == "const":
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=float)
    return {w: grads.get(w.id, np.zeros(w.shape)).reshape(w.shape) for w in wrt}


def value_and_grad(fn, params: dict[str, np.ndarray]):
    """Evaluate ``fn(tape, nodes)`` and its gradient wrt every entry of ``params``."""
    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in params.items()}
    out = fn(tape, nodes)
    g = backward(out, list(nodes.values()))
    return float(out.value[0, 0]), {k: g[n] for k, n in nodes.items()}
