import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnreid.engine import (
    DimensionError,
    GraphError,
    NumericalError,
    Tensor,
    check_finite,
    default_dtype,
    grad_check,
    no_grad,
    ops,
    precision,
)

TOL = 1e-3


def naive_conv2d(x, w, b, stride, pad):
    """Six nested loops, no vectorization."""
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[n, oc, i, j] = acc
    return out


def naive_max_pool(x, k, stride, pad):
    bsz, c, h, w = x.shape
    xp = np.full((bsz, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((bsz, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    expected = naive_conv2d(x, w, b, stride, pad)
    with precision("float64"):
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, expected, atol=1e-10)
    got32 = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got32, expected, atol=1e-4, rtol=1e-5)


def test_conv2d_single_pixel_kernel_hand_case():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), dtype=np.float64)
    w = Tensor(np.full((1, 1, 1, 1), 2.0), dtype=np.float64)
    np.testing.assert_array_equal(ops.conv2d(x, w).data, [[[[0.0, 2.0], [4.0, 6.0]]]])


def test_conv_output_size_rules():
    assert ops.conv_output_size(64, 3, 2, 1) == 32
    assert ops.conv_output_size(256, 7, 2, 3) == 128
    assert ops.conv_output_size(5, 3, 2, 0) == 2
    with pytest.raises(DimensionError):
        ops.conv_output_size(2, 5, 1, 0)
    with pytest.raises(DimensionError):
        ops.conv_output_size(64, 3, 2, 1, exact=True)
    assert ops.conv_output_size(5, 3, 2, 0, exact=True) == 2


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 1, 1))))


def test_max_pool_matches_oracle():
    x = np.random.default_rng(3).standard_normal((2, 3, 7, 5))
    with precision("float64"):
        got = ops.max_pool2d(Tensor(x), 3, 2, 1).data
    np.testing.assert_array_equal(got, naive_max_pool(x, 3, 2, 1))


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def _rand(rng, *shape):
    return rng.standard_normal(shape)


GRAD_CASES = {
    "add_broadcast": (lambda a, b: ops.sum(ops.mul(ops.add(a, b), ops.add(a, b))), [(3, 4), (4,)]),
    "sub_div": (lambda a, b: ops.sum(ops.div(ops.sub(a, b), ops.add(ops.mul(b, b), 1.0))), [(3, 4), (3, 1)]),
    "exp_log": (lambda a: ops.sum(ops.log(ops.add(ops.exp(a), 1.0))), [(5,)]),
    "sqrt": (lambda a: ops.sum(ops.sqrt(ops.add(ops.mul(a, a), 1.0))), [(5,)]),
    "sigmoid": (lambda a: ops.sum(ops.mul(ops.sigmoid(a), a)), [(6,)]),
    "softplus": (lambda a: ops.sum(ops.mul(ops.softplus(a), a)), [(6,)]),
    "softmax": (lambda a: ops.sum(ops.mul(ops.softmax(a, axis=1), a)), [(3, 5)]),
    "log_softmax": (lambda a: ops.sum(ops.mul(ops.log_softmax(a, axis=1), a)), [(3, 5)]),
    "logsumexp": (lambda a: ops.sum(ops.logsumexp(a, axis=0)), [(4, 3)]),
    "mean_transpose": (lambda a: ops.mean(ops.mul(ops.transpose(a), ops.transpose(a))), [(3, 4)]),
    "matmul_batched": (lambda a, b: ops.sum(ops.mul(ops.matmul(a, b), ops.matmul(a, b))), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: ops.sum(ops.mul(ops.linear(x, w, b), ops.linear(x, w, b))), [(3, 4), (4, 2), (2,)]),
    "take_concat": (lambda a: ops.sum(ops.mul(ops.concat([ops.take(a, [2, 0, 2]), a]), 1.5)), [(4, 2)]),
    "l2_normalize": (lambda a: ops.sum(ops.mul(ops.l2_normalize(a, axis=1), ops.l2_normalize(a, axis=1)[:, :1])), [(3, 4)]),
    "conv2d_s2p1": (lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, 2, 1), ops.conv2d(x, w, b, 2, 1))),
                    [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_1x1": (lambda x, w: ops.sum(ops.mul(ops.conv2d(x, w), ops.conv2d(x, w))), [(2, 3, 3, 2), (2, 3, 1, 1)]),
    "global_avg_pool": (lambda x: ops.sum(ops.mul(ops.global_avg_pool(x), ops.global_avg_pool(x))), [(2, 3, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients(name):
    f, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    assert grad_check(f, [_rand(rng, *s) for s in shapes]) < TOL


def test_relu_and_max_pool_gradients_away_from_kinks():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 5, 5))
    x[np.abs(x) < 0.05] = 0.3
    assert grad_check(lambda t: ops.sum(ops.mul(ops.relu(t), t)), x) < TOL
    # distinct values so the max within each window is unique
    x = rng.permutation(100)[:50].reshape(2, 1, 5, 5) / 10.0
    assert grad_check(lambda t: ops.sum(ops.mul(ops.max_pool2d(t, 3, 2, 1), ops.max_pool2d(t, 3, 2, 1))), x) < TOL


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(training):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 2, 2))
    g = rng.standard_normal(3)
    b = rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    w = rng.standard_normal((4, 3, 2, 2))

    def f(x, g, b):
        return ops.sum(ops.mul(ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training), w))

    assert grad_check(f, [x, g, b]) < TOL


def test_batch_norm_running_statistics_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    with precision("float64"):
        out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True, 0.1, 1e-5).data
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(axis=1))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(axis=1, ddof=1))
    np.testing.assert_allclose(out.transpose(1, 0, 2, 3).reshape(2, -1),
                               (flat - flat.mean(1, keepdims=True)) / np.sqrt(flat.var(1, keepdims=True) + 1e-5))


def test_batch_norm_rejects_single_value_per_channel():
    with pytest.raises(DimensionError):
        ops.batch_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), True)


def test_backward_twice_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(ops.mul(a, a))
    loss.backward()
    np.testing.assert_array_equal(a.grad, 2 * np.ones(3))
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_requires_scalar_root():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ops.mul(a, a).backward()


def test_gradient_accumulates_over_shared_subgraph():
    a = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    y = ops.mul(a, a)
    ops.sum(ops.add(y, y)).backward()
    np.testing.assert_allclose(a.grad, [12.0])


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = ops.sum(ops.mul(a, a))
    assert not out.requires_grad
    with pytest.raises(GraphError):
        out.backward()


def test_precision_mode_is_scoped():
    assert default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


def test_check_finite():
    check_finite(Tensor([1.0, 2.0]))
    with pytest.raises(NumericalError):
        check_finite(Tensor([1.0, np.nan]), "x")


finite = st.floats(-1e4, 1e4, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    with precision("float64"):
        s = ops.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30, width=64)))
def test_sigmoid_strictly_inside_unit_interval(x):
    with precision("float64"):
        s = ops.sigmoid(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3, width=64)))
def test_sigmoid_and_softplus_stay_finite(x):
    with precision("float64"):
        assert np.all(np.isfinite(ops.sigmoid(Tensor(x * 10)).data))
        assert np.all(np.isfinite(ops.softplus(Tensor(x * 10)).data))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_gradient_shape_matches_operand(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((rows, cols)), requires_grad=True)
    b = Tensor(rng.standard_normal((cols,)), requires_grad=True)
    ops.sum(ops.mul(a, b)).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-5)
