import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptseg import autograd as ag
from promptseg.autograd import Tensor
from promptseg.errors import ContractError, DimensionError


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- oracles ---------------------------------------------------------------


def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


def conv3d_loops(x, w, b, stride, padding):
    cin, X, Y, Z = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((cin, X + 2 * padding, Y + 2 * padding, Z + 2 * padding))
    xp[:, padding : padding + X, padding : padding + Y, padding : padding + Z] = x
    ox, oy, oz = [(n + 2 * padding - k) // stride + 1 for n in (X, Y, Z)]
    out = np.zeros((cout, ox, oy, oz))
    for o in range(cout):
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    acc = b[o]
                    for c in range(cin):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    acc += w[o, c, a, bb, cc] * xp[c, i * stride + a, j * stride + bb, l * stride + cc]
                    out[o, i, j, l] = acc
    return out


def conv_transpose3d_loops(x, w, b, stride):
    cin, X, Y, Z = x.shape
    _, cout, k, _, _ = w.shape
    out = np.zeros((cout,) + tuple((n - 1) * stride + k for n in (X, Y, Z)))
    for c in range(cin):
        for i in range(X):
            for j in range(Y):
                for l in range(Z):
                    for o in range(cout):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    out[o, i * stride + a, j * stride + bb, l * stride + cc] += x[c, i, j, l] * w[c, o, a, bb, cc]
    return out + b.reshape(-1, 1, 1, 1)


def ints(rng, shape, lo=-4, hi=5):
    return rng.integers(lo, hi, size=shape).astype(np.float64)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity_and_scalar():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ag.matmul(t64(np.eye(3)), t64(b)).data, b)
    assert ag.matmul(t64([[2.0]]), t64([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    ai, bi = ints(rng, (4, 5)), ints(rng, (5, 3))
    assert np.array_equal(ag.matmul(t64(ai), t64(bi)).data, matmul_loops(ai, bi))
    np.testing.assert_allclose(ag.matmul(t64(a), t64(b)).data, matmul_loops(a, b), rtol=0, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ag.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_matmul_gradients_are_gbt_and_atg():
    rng = np.random.default_rng(2)
    a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    ag.backward(ag.tsum(ag.mul(ag.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


# -- layer norm, softmax, gelu ---------------------------------------------------


def test_layer_norm_examples():
    one, zero = np.ones(4), np.zeros(4)
    out = ag.layer_norm(t64(np.full((1, 4), 3.0)), t64(one), t64(zero)).data
    assert np.array_equal(out, np.zeros((1, 4)))
    out = ag.layer_norm(t64([[-1.0, 1.0]]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)
    x = np.random.default_rng(3).standard_normal((3, 4)) * 5 + 2
    out = ag.layer_norm(t64(x), t64(one), t64(zero), eps=1e-5).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1) < 1e-3)


def test_layer_norm_feature_mismatch():
    with pytest.raises(DimensionError):
        ag.layer_norm(t64(np.ones((2, 4))), t64(np.ones(3)), t64(np.zeros(4)))
    with pytest.raises(ContractError):
        ag.layer_norm(t64(np.ones((2, 4))), t64(np.ones(4)), t64(np.zeros(4)), eps=0)


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax_rows(t64([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    out = ag.softmax_rows(t64([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12))
def test_softmax_rows_are_distributions(row):
    out = ag.softmax_rows(t64([row])).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-6


def test_gelu_examples():
    assert ag.gelu(t64([0.0])).data[0] == 0.0
    assert abs(ag.gelu(t64([20.0])).data[0] - 20.0) < 1e-6
    exact = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(ag.gelu(t64([1.0])).data[0] - exact) < 1e-3


# -- convolutions ----------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(4).standard_normal((3, 4, 5, 6))
    w = np.eye(3).reshape(3, 3, 1, 1, 1)
    out = ag.conv3d(t64(x), t64(w), t64(np.zeros(3))).data
    assert np.array_equal(out, x)


def test_conv_transpose_extent():
    out = ag.conv_transpose3d(t64(np.ones((2, 4, 4, 4))), t64(np.ones((2, 3, 2, 2, 2))), t64(np.zeros(3)), stride=2)
    assert out.shape == (3, 8, 8, 8)
    assert ag.conv_transpose_output_size(4, 2, 2) == 8
    assert ag.conv_output_size(8, 3, 1, 1) == 8


@pytest.mark.parametrize(
    "shape,cin,cout,k,stride,padding",
    [((4, 4, 4), 2, 3, 3, 1, 1), ((5, 6, 4), 1, 2, 3, 2, 0), ((6, 6, 6), 2, 2, 1, 1, 0), ((3, 5, 4), 3, 1, 2, 1, 1)],
)
def test_conv3d_matches_loop_oracle_exactly(shape, cin, cout, k, stride, padding):
    rng = np.random.default_rng(5)
    x, w, b = ints(rng, (cin,) + shape), ints(rng, (cout, cin, k, k, k)), ints(rng, (cout,))
    out = ag.conv3d(t64(x), t64(w), t64(b), stride=stride, padding=padding).data
    assert np.array_equal(out, conv3d_loops(x, w, b, stride, padding))


@pytest.mark.parametrize(
    "shape,cin,cout,k,stride", [((2, 3, 2), 2, 3, 2, 2), ((3, 3, 3), 1, 2, 3, 2), ((2, 2, 2), 2, 1, 3, 1), ((3, 2, 4), 2, 2, 1, 1)]
)
def test_conv_transpose3d_matches_loop_oracle_exactly(shape, cin, cout, k, stride):
    rng = np.random.default_rng(6)
    x, w, b = ints(rng, (cin,) + shape), ints(rng, (cin, cout, k, k, k)), ints(rng, (cout,))
    out = ag.conv_transpose3d(t64(x), t64(w), t64(b), stride=stride).data
    assert np.array_equal(out, conv_transpose3d_loops(x, w, b, stride))


@given(
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    st.integers(1, 2),
    st.integers(1, 2),
    st.sampled_from([1, 2, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.integers(0, 2**31),
)
def test_conv3d_oracle_property(shape, cin, cout, k, stride, padding, seed):
    if any(n + 2 * padding < k for n in shape):
        return
    rng = np.random.default_rng(seed)
    x, w, b = ints(rng, (cin,) + shape), ints(rng, (cout, cin, k, k, k)), ints(rng, (cout,))
    assert np.array_equal(ag.conv3d(t64(x), t64(w), t64(b), stride, padding).data, conv3d_loops(x, w, b, stride, padding))


@given(
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    st.integers(1, 2),
    st.integers(1, 2),
    st.sampled_from([1, 2]),
    st.integers(1, 2),
    st.integers(0, 2**31),
)
def test_conv_transpose3d_oracle_property(shape, cin, cout, k, stride, seed):
    rng = np.random.default_rng(seed)
    x, w, b = ints(rng, (cin,) + shape), ints(rng, (cin, cout, k, k, k)), ints(rng, (cout,))
    assert np.array_equal(ag.conv_transpose3d(t64(x), t64(w), t64(b), stride).data, conv_transpose3d_loops(x, w, b, stride))


def test_conv_geometry_errors():
    with pytest.raises(DimensionError):
        ag.conv3d(t64(np.ones((2, 4, 4, 4))), t64(np.ones((1, 3, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ag.conv_transpose3d(t64(np.ones((2, 4, 4, 4))), t64(np.ones((3, 1, 2, 2, 2))))


# -- backward ----------------------------------------------------------------------


def test_backward_examples():
    w = t64([1.0, 2.0, 3.0])
    ag.backward(ag.tsum(w))
    assert np.array_equal(w.grad, np.ones(3))
    w = t64([1.0, 2.0])
    ag.backward(ag.tsum(ag.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar_root():
    w = t64([1.0, 2.0])
    with pytest.raises(ContractError):
        ag.backward(ag.mul(w, 2.0))


def test_frozen_leaves_never_receive_grad():
    a, frozen = t64(np.ones((2, 3))), t64(np.ones((3, 2)), grad=False)
    ag.backward(ag.tsum(ag.matmul(a, frozen)))
    assert a.grad is not None
    assert frozen.grad is None


def test_no_grad_records_nothing():
    a = t64(np.ones(3))
    with ag.no_grad():
        out = ag.mul(a, 2.0)
    assert not out.requires_grad
    assert ag.is_grad_enabled()


def test_broadcast_rules():
    a = t64(np.ones((2, 3)))
    ag.add(a, t64(np.ones(3)))
    ag.add(a, 1.0)
    with pytest.raises(DimensionError):
        ag.add(a, t64(np.ones(2)))
    with pytest.raises(DimensionError):
        ag.mul(a, t64(np.ones((1, 3))))


def test_shared_subexpression_accumulates():
    x = t64([3.0])
    y = ag.mul(x, x)
    ag.backward(ag.tsum(ag.add(y, y)))
    assert x.grad.tolist() == [12.0]


# -- finite-difference checks -------------------------------------------------------------


def _random_unary(name, rng):
    x = t64(rng.standard_normal((3, 4)))
    if name == "log":
        x = t64(rng.uniform(0.5, 2.0, (3, 4)))
    fn = {
        "gelu": ag.gelu,
        "log": ag.log,
        "softmax": ag.softmax_rows,
        "log_softmax": ag.log_softmax_rows,
        "transpose": ag.transpose,
        "reshape": lambda t: ag.reshape(t, (4, 3)),
        "getitem": lambda t: t[1:],
        "mean": lambda t: ag.mean(t, axis=0),
        "neg": ag.neg,
    }[name]
    weights = t64(rng.standard_normal(fn(x).shape), grad=False)
    return (lambda: ag.tsum(ag.mul(fn(x), weights))), x


@pytest.mark.parametrize("name", ["gelu", "log", "softmax", "log_softmax", "transpose", "reshape", "getitem", "mean", "neg"])
@pytest.mark.parametrize("seed", range(20))
def test_unary_ops_match_finite_differences(name, seed):
    f, x = _random_unary(name, np.random.default_rng(seed))
    report = ag.grad_check(f, {"x": x}, tol=1e-4)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "bias", "concat", "layer_norm"])
@pytest.mark.parametrize("seed", range(20))
def test_binary_ops_match_finite_differences(op, seed):
    rng = np.random.default_rng(100 + seed)
    a = t64(rng.standard_normal((3, 4)))
    b = t64(rng.uniform(0.5, 2.0, (3, 4)))
    if op == "matmul":
        b = t64(rng.standard_normal((4, 2)))
    if op == "bias":
        b = t64(rng.standard_normal(4))
    if op == "layer_norm":
        gamma, beta = t64(rng.standard_normal(4)), t64(rng.standard_normal(4))
    fn = {
        "add": lambda: ag.add(a, b),
        "sub": lambda: ag.sub(a, b),
        "mul": lambda: ag.mul(a, b),
        "div": lambda: ag.div(a, b),
        "matmul": lambda: ag.matmul(a, b),
        "bias": lambda: ag.add(a, b),
        "concat": lambda: ag.concat([a, b], axis=0),
        "layer_norm": lambda: ag.layer_norm(a, gamma, beta),
    }[op]
    weights = t64(rng.standard_normal(fn().shape), grad=False)
    params = {"a": a, "b": b} if op != "layer_norm" else {"a": a, "gamma": gamma, "beta": beta}
    report = ag.grad_check(lambda: ag.tsum(ag.mul(fn(), weights)), params, tol=1e-4)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("seed", range(20))
def test_convolutions_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = t64(rng.standard_normal((2, 4, 3, 4)))
    w = t64(rng.standard_normal((2, 2, 3, 3, 3)) * 0.3)
    b = t64(rng.standard_normal(2))
    wt = t64(rng.standard_normal((2, 1, 2, 2, 2)))
    bt = t64(rng.standard_normal(1))

    def f():
        h = ag.conv3d(x, w, b, stride=1, padding=1)
        return ag.tsum(ag.mul(ag.conv_transpose3d(h, wt, bt, stride=2), ag.conv_transpose3d(h, wt, bt, stride=2)))

    report = ag.grad_check(f, {"x": x, "w": w, "b": b, "wt": wt, "bt": bt}, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_strided_conv_matches_finite_differences():
    rng = np.random.default_rng(7)
    x, w = t64(rng.standard_normal((1, 5, 5, 5))), t64(rng.standard_normal((2, 1, 3, 3, 3)))
    wt = t64(rng.standard_normal((2, 1, 3, 3, 3)))
    f = lambda: ag.tsum(ag.gelu(ag.conv_transpose3d(ag.conv3d(x, w, stride=2), wt, stride=2)))  # noqa: E731
    assert ag.grad_check(f, {"x": x, "w": w, "wt": wt}, tol=1e-4).passed


def test_grad_check_quadratic_is_near_exact():
    theta = t64(np.random.default_rng(8).standard_normal(6))
    report = ag.grad_check(lambda: ag.tsum(ag.mul(theta, theta)), theta, tol=1e-8)
    assert report.worst < 1e-8


def test_grad_check_refuses_nondeterminism_and_float32():
    theta = t64([1.0, 2.0])
    calls = iter(range(100))
    with pytest.raises(ContractError):
        ag.grad_check(lambda: ag.tsum(ag.mul(theta, float(next(calls)))), theta)
    with pytest.raises(ContractError):
        ag.grad_check(lambda: ag.tsum(theta), Tensor(np.ones(2, dtype=np.float32)))


def test_attention_block_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((5, 8)))
    wq, wk, wv = (t64(rng.standard_normal((8, 8)) * 0.3) for _ in range(3))

    def f():
        q, k, v = ag.matmul(x, wq), ag.matmul(x, wk), ag.matmul(x, wv)
        att = ag.softmax_rows(ag.mul(ag.matmul(q, ag.transpose(k)), 1 / math.sqrt(8)))
        return ag.tsum(ag.gelu(ag.matmul(att, v)))

    assert ag.grad_check(f, {"x": x, "wq": wq, "wk": wk, "wv": wv}, tol=1e-4).passed


def test_precision_context_switches_default_dtype():
    # float inputs keep their dtype; anything else takes the default precision
    with ag.precision(np.float64):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64
