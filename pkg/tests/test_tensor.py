import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sliceout.errors import AxisError, BoundsError, LabelError, NumericError, ShapeError
from sliceout.tensor import (
    InstrumentationCounters,
    Tensor,
    batchnorm,
    conv2d,
    cross_entropy,
    grad_check,
    layer_norm,
    matmul,
    mul_scalar,
    relu,
    slice_view,
    softmax,
    tsum,
    use_counters,
)


def test_full_range_slice_is_identical_view():
    t = Tensor(np.arange(10.0))
    v = slice_view(t, 0, 0, 10)
    assert v.shape == t.shape
    assert np.array_equal(v.data, t.data)
    assert v.shares_memory(t)


def test_slice_view_copies_nothing():
    t = Tensor(np.arange(10.0))
    c = InstrumentationCounters()
    with use_counters(c):
        v = slice_view(t, 0, 3, 4)
    assert v.data.tolist() == [3, 4, 5, 6]
    assert c.copy_bytes_allocated == 0
    assert v.is_view


def test_write_through_view():
    t = Tensor(np.zeros((4, 6)))
    v = slice_view(t, 1, 2, 3)
    assert v.shape == (4, 3)
    v[0, 0] = 99
    assert t.data[0, 2] == 99
    assert v.offset == 2
    assert v.strides == (6, 1)


def test_row_major_strides():
    t = Tensor(np.zeros((3, 4, 5)))
    assert t.strides == (20, 5, 1)
    assert t.size == 60


def test_slice_view_errors():
    t = Tensor(np.zeros((4, 6)))
    with pytest.raises(AxisError):
        slice_view(t, 2, 0, 1)
    with pytest.raises(BoundsError):
        slice_view(t, 1, 4, 3)
    with pytest.raises(BoundsError):
        slice_view(t, 1, 0, 0)


def test_slice_gradient_scatters_with_exact_zeros():
    t = Tensor(np.arange(10.0), requires_grad=True)
    v = slice_view(t, 0, 3, 4)
    tsum(mul_scalar(v, 2.0)).backward()
    expected = np.zeros(10)
    expected[3:7] = 2.0
    assert np.array_equal(t.grad, expected)


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    assert np.array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)
    assert matmul(a, Tensor(np.array([[5.0], [6]]))).data.tolist() == [[17], [39]]
    with pytest.raises(ShapeError):
        matmul(a, Tensor(np.ones((3, 1))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    tsum(matmul(A, B)).backward()
    assert np.allclose(A.grad, np.ones((3, 2)) @ B.data.T)
    assert grad_check(lambda i: tsum(matmul(i[0], i[1])), [A, B]) < 1e-6


def test_conv2d_examples():
    x = np.random.default_rng(1).standard_normal((1, 1, 4, 4))
    assert np.allclose(conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(k), padding=1, stride=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k)
    assert np.allclose(out, ref)


def test_conv2d_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    w = rng.standard_normal((1, 3, 4, 4))
    assert grad_check(lambda i: tsum(conv2d(i[0], i[1], padding=1) * Tensor(w)), [x, k]) < 1e-6


def test_elementwise_examples():
    assert relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0, 2]
    assert softmax(Tensor(np.zeros(2))).data.tolist() == [0.5, 0.5]


def test_cross_entropy_gradient_and_labels():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((5, 3)))
    labels = np.array([0, 2, 1, 1, 0])
    assert grad_check(lambda i: cross_entropy(i[0], labels), [logits]) < 1e-6
    with pytest.raises(LabelError):
        cross_entropy(logits, np.array([0, 3, 1, 1, 0]))


def test_batchnorm_and_layer_norm_gradients():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 3, 2, 2)))
    g, b = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    w = rng.standard_normal((4, 3, 2, 2))
    f = lambda i: tsum(batchnorm(i[0], i[1], i[2], rm, rv, True) * Tensor(w))
    assert grad_check(f, [x, g, b]) < 1e-6
    x2 = Tensor(rng.standard_normal((3, 5)))
    g2, b2 = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
    w2 = rng.standard_normal((3, 5))
    assert grad_check(lambda i: tsum(layer_norm(i[0], i[1], i[2]) * Tensor(w2)), [x2, g2, b2]) < 1e-6


def test_batchnorm_eval_uses_running_stats():
    x = Tensor(np.full((2, 1, 1, 1), 3.0))
    out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([1.0]), np.array([4.0]), False, eps=0.0)
    assert np.allclose(out.data, 1.0)


def test_grad_check_examples():
    x = Tensor(np.array([1.0, 2.0]))
    assert grad_check(lambda i: tsum(i[0] * i[0]), [x]) < 1e-8
    assert np.array_equal(x.grad, [2.0, 4.0])
    y = Tensor(np.random.default_rng(6).standard_normal(5))
    assert grad_check(lambda i: tsum(i[0]), [y]) < 1e-10
    assert np.array_equal(y.grad, np.ones(5))


def test_grad_check_rejects_bad_inputs():
    with pytest.raises(NumericError):
        grad_check(lambda i: tsum(i[0]), [Tensor(np.ones(2, dtype=np.float32))])
    with pytest.raises(NumericError):
        grad_check(lambda i: tsum(i[0]), [Tensor(np.ones(2))], epsilon=1e-2)
    with pytest.raises(NumericError):
        grad_check(lambda i: tsum(i[0]), [Tensor(np.array([np.inf, 1.0]))])


def test_backward_visits_shared_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    tsum(y + y).backward()
    assert x.grad.tolist() == [8.0]


def test_activation_gauge():
    c = InstrumentationCounters()
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    with use_counters(c):
        y = relu(x)
        assert c.live_activation_bytes == y.nbytes
        z = tsum(mul_scalar(y, 2.0))
        assert c.peak_activation_bytes >= c.live_activation_bytes
        z.backward()
    assert c.live_activation_bytes == 0
    assert c.peak_activation_bytes >= 2 * 16 * 8
    c.reset()
    assert c.peak_activation_bytes == 0 and c.multiply_ops == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_slice_view_matches_numpy(rows, cols, data):
    axis = data.draw(st.integers(0, 1))
    m = (rows, cols)[axis]
    width = data.draw(st.integers(1, m))
    start = data.draw(st.integers(0, m - width))
    arr = np.arange(rows * cols, dtype=float).reshape(rows, cols)
    v = slice_view(Tensor(arr), axis, start, width)
    assert np.array_equal(v.data, np.take(arr, range(start, start + width), axis=axis))
    assert v.size == int(np.prod(v.shape))
