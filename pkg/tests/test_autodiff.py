import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from df2m import autodiff as ad
from helpers import check_tape_grad


# ----------------------------------------------------------- forward examples

def test_matmul_identity():
    tape = ad.Tape()
    M = np.arange(9.0).reshape(3, 3)
    out = tape.forward("matmul", [np.eye(3), tape.variable(M)])
    np.testing.assert_array_equal(out.value, M)


def test_logdet_of_scaled_identity():
    tape = ad.Tape()
    out = tape.forward("logdet", [tape.variable(2 * np.eye(2))])
    assert out.value[0, 0] == pytest.approx(2 * np.log(2), abs=1e-12)
    assert out.value[0, 0] == pytest.approx(1.3863, abs=1e-4)


def test_cholesky_example():
    tape = ad.Tape()
    A = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = tape.forward("cholesky", [tape.variable(A)]).value
    np.testing.assert_allclose(L, [[2, 0], [1, np.sqrt(2)]], atol=1e-12)
    np.testing.assert_allclose(L @ L.T, A, atol=1e-12)


# ---------------------------------------------------------- backward examples

def test_square_derivative():
    tape = ad.Tape()
    x = tape.variable(3.0)
    assert ad.backward(x * x, [x])[x][0, 0] == 6.0


def test_logdet_gradient_is_inverse_transpose():
    tape = ad.Tape()
    A = tape.variable(np.diag([2.0, 5.0]))
    g = ad.backward(ad.logdet(A), [A])[A]
    np.testing.assert_allclose(g, np.diag([0.5, 0.2]), atol=1e-12)


def test_logdet_gradient_general_spd(rng):
    B = rng.standard_normal((4, 4))
    A = B @ B.T + 4 * np.eye(4)
    tape = ad.Tape()
    node = tape.variable(A)
    g = ad.backward(ad.logdet(node), [node])[node]
    np.testing.assert_allclose(g, np.linalg.inv(A).T, atol=1e-10)


def test_unreachable_node_gets_zero_adjoint():
    tape = ad.Tape()
    x, y = tape.variable(2.0), tape.variable(np.ones((2, 3)))
    g = ad.backward(x * 3.0, [x, y])
    assert g[x][0, 0] == 3.0
    np.testing.assert_array_equal(g[y], np.zeros((2, 3)))


def test_backward_errors():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.backward(x, [x])
    other = ad.Tape().variable(1.0)
    with pytest.raises(ValueError):
        ad.backward(ad.sum_(x), [other])


def test_shape_errors():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError):
        tape.variable(np.ones((2, 3))) @ tape.variable(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        tape.variable(np.ones((2, 3))) + tape.variable(np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.cholesky(tape.variable(np.array([[1.0, 2.0], [0.0, 1.0]])))
    with pytest.raises(ad.ShapeError):
        tape.variable(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        tape.forward("no-such-op", [tape.variable(1.0)])


def test_mixing_tapes_is_rejected():
    a, b = ad.Tape().variable(1.0), ad.Tape().variable(1.0)
    with pytest.raises(ValueError):
        a + b


def test_cholesky_failure_reports_minor():
    A = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ad.CholeskyError) as info:
        ad.cholesky(ad.Tape().variable(A))
    assert info.value.minor == 2


def test_cholesky_jitter_rescues_singular_psd():
    v = np.array([[1.0], [1.0]])
    L, jitter = ad.cholesky_factor(v @ v.T)
    assert 0 < jitter <= 1e-4
    np.testing.assert_allclose(L @ L.T, v @ v.T, atol=1e-4)


# ------------------------------------------------------------ gradient checks

def _spd(B):
    n = B.shape[0]
    return B @ ad.transpose(B) + 2.0 * np.eye(n)


UNARY = {
    "exp": (ad.exp, 0.5), "log": (lambda x: ad.log(ad.square(x) + 1.0), 1.0),
    "log1p": (lambda x: ad.log1p(ad.square(x)), 1.0), "sigmoid": (ad.sigmoid, 1.0),
    "tanh": (ad.tanh, 1.0), "relu": (ad.relu, 1.0), "softplus": (ad.softplus, 1.0),
    "square": (ad.square, 1.0), "sqrt": (lambda x: ad.sqrt(ad.square(x) + 0.5), 1.0),
    "gammaln": (lambda x: ad.gammaln(ad.square(x) + 0.5), 1.0),
    "digamma": (lambda x: ad.digamma(ad.square(x) + 0.5), 1.0),
    "neg": (lambda x: -x, 1.0), "clip": (lambda x: ad.clip(x, -0.5, 0.5), 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, scale = UNARY[name]
    X = scale * rng.standard_normal((3, 4))
    X[np.abs(np.abs(X) - 0.5) < 1e-3] += 0.01  # stay off the clip kinks
    W = rng.standard_normal((3, 4))
    check_tape_grad(lambda t, p: ad.sum_(fn(p["x"]) * W), {"x": X})


STRUCTURAL = {
    "add": lambda p: p["a"] + p["b"],
    "sub": lambda p: p["a"] - p["b"],
    "mul": lambda p: p["a"] * p["b"],
    "div": lambda p: p["a"] / (ad.square(p["b"]) + 1.0),
    "broadcast": lambda p: p["a"] * ad.sum_(p["b"], axis=0) + ad.sum_(p["b"], axis=1),
    "matmul": lambda p: p["a"] @ ad.transpose(p["b"]),
    "reshape": lambda p: ad.reshape(p["a"], (2, 6)),
    "permute": lambda p: ad.permute(p["a"], (3, 2, 2), (1, 0, 2), (2, 6)),
    "mean": lambda p: ad.mean(p["a"], axis=0) + ad.mean(p["b"]),
    "trace_diag": lambda p: ad.trace(p["a"][:, :3]) * ad.diag(p["b"][:, 1:]),
    "slice_concat": lambda p: ad.concat([p["a"][1:, :], p["b"][0]], axis=0),
    "softmax": lambda p: ad.softmax_rows(p["a"] @ ad.transpose(p["b"]),
                                         np.tril(np.ones((3, 3), dtype=bool))),
    "sqdist": lambda p: ad.sqdist(p["a"], p["b"]),
    "cholesky": lambda p: ad.cholesky(_spd(p["a"])),
    "solve_triangular": lambda p: ad.solve_triangular(ad.cholesky(_spd(p["a"])), p["b"]),
    "solve_triangular_trans": lambda p: ad.solve_triangular(ad.cholesky(_spd(p["a"])), p["b"],
                                                            trans=True),
    "logdet": lambda p: ad.logdet(_spd(p["a"])) * p["b"],
    "cho_solve": lambda p: ad.cho_solve(ad.cholesky(_spd(p["a"])), p["b"]),
}


@pytest.mark.parametrize("name", sorted(STRUCTURAL))
def test_structural_gradients(name, rng):
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
    W = None

    def build(tape, p):
        nonlocal W
        out = STRUCTURAL[name](p)
        if W is None:
            W = np.random.default_rng(1).standard_normal(out.shape)
        return ad.sum_(out * W)

    check_tape_grad(build, params)


def test_beta_icdf_gradient(rng):
    u = rng.uniform(0.05, 0.95, size=(5, 3))
    params = {"a": rng.uniform(0.5, 3.0, (1, 3)), "b": rng.uniform(0.5, 3.0, (1, 3))}
    check_tape_grad(lambda t, p: ad.sum_(ad.beta_icdf(p["a"], p["b"], u)), params)


def _random_graph(seed):
    """A depth-8 composite of randomly chosen 3x3 -> 3x3 operations."""
    rng = np.random.default_rng(seed)
    steps = [
        lambda x, p: x @ p["P"],
        lambda x, p: x + p["Q"],
        lambda x, p: x - 0.5 * p["Q"],
        lambda x, p: x * p["Q"],
        lambda x, p: x / (ad.square(p["Q"]) + 1.0),
        lambda x, p: ad.sigmoid(x),
        lambda x, p: ad.tanh(x),
        lambda x, p: ad.exp(0.2 * x),
        lambda x, p: ad.log(ad.square(x) + 1.0),
        lambda x, p: ad.relu(x) + 0.3 * x,
        lambda x, p: ad.transpose(x),
        lambda x, p: ad.softmax_rows(x) + x,
        lambda x, p: ad.cholesky(x @ ad.transpose(x) + 3.0 * np.eye(3)),
        lambda x, p: ad.solve_triangular(ad.cholesky(p["P"] @ ad.transpose(p["P"])
                                                     + 3.0 * np.eye(3)), x),
        lambda x, p: x + 0.1 * ad.logdet(x @ ad.transpose(x) + 3.0 * np.eye(3)),
        lambda x, p: ad.concat([x[:, :2], 2.0 * x[:, 2:]], axis=1),
        lambda x, p: x + 0.1 * ad.trace(x),
        lambda x, p: x - ad.mean(x, axis=0),
    ]
    order = rng.permutation(len(steps))[:8]
    params = {"X": rng.standard_normal((3, 3)), "P": rng.standard_normal((3, 3)),
              "Q": rng.standard_normal((3, 3))}

    def build(tape, p):
        x = p["X"]
        for i in order:
            x = steps[i](x, p)
        return ad.sum_(ad.square(x))

    return build, params


@pytest.mark.parametrize("seed", range(20))
def test_random_composite_graphs(seed):
    build, params = _random_graph(seed)
    check_tape_grad(build, params, rtol=1e-5)


def test_forward_backward_bit_identical():
    build, params = _random_graph(3)
    v1, g1 = ad.value_and_grad(build, params)
    v2, g2 = ad.value_and_grad(build, params)
    assert v1 == v2
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


# ------------------------------------------------------------------ properties

finite = st.floats(-5, 5, allow_nan=False)


@given(hnp.arrays(np.float64, (3, 3), elements=finite))
def test_forward_values_are_finite(X):
    tape = ad.Tape()
    x = tape.variable(X)
    for node in (ad.sigmoid(x), ad.tanh(x), ad.softplus(x), ad.softmax_rows(x),
                 ad.cholesky(x @ ad.transpose(x) + np.eye(3))):
        assert np.all(np.isfinite(node.value))


@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_linear_ops_gradient_identity(A, B):
    # d/dA sum(A * B) = B exactly
    tape = ad.Tape()
    a = tape.variable(A)
    g = ad.backward(ad.sum_(a * B), [a])[a]
    np.testing.assert_array_equal(g, B)


def test_parents_precede_children():
    build, params = _random_graph(5)
    tape = ad.Tape()
    build(tape, {k: tape.variable(v) for k, v in params.items()})
    for node in tape.nodes:
        assert all(p.id < node.id for p in node.parents)
