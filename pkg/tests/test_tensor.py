import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvp import tensor as T
from mvp.gradcheck import check_gradients
from mvp.tensor import ContractError, DimensionError, Tape, backward

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def rand(*shape, seed=0):
    return T.parameter(np.random.default_rng(seed).normal(size=shape))


@pytest.mark.parametrize("op", [T.exp, T.sigmoid, T.softplus, T.tanh, T.gelu,
                                lambda x: T.softmax_lastdim(x), lambda x: x * x,
                                lambda x: T.sqrt(x * x + 1.0), lambda x: T.log(x * x + 1.0),
                                lambda x: T.power(x * x + 1.0, 1.5)])
def test_unary_gradients(op):
    x = rand(3, 5)
    assert check_gradients(lambda: T.tsum(op(x) * op(x)), [x]) < 1e-5


def test_broadcast_binary_gradients():
    a, b = rand(4, 1, 3), rand(5, 3, seed=1)
    fn = lambda: T.tsum((a + b) * (a - b) / (b * b + 2.0))
    assert check_gradients(fn, [a, b]) < 1e-5


def test_norm_and_matmul_gradients():
    x, w = rand(2, 6, 8), rand(8, 4, seed=1)
    g, b, r = rand(8, seed=2), rand(8, seed=3), rand(4, seed=4)
    fn = lambda: T.tsum(T.rms_norm(T.matmul(T.layer_norm(x, g, b), w), r) ** 2)
    assert check_gradients(fn, [x, w, g, b, r]) < 1e-5


@pytest.mark.parametrize("stride,pad,mode", [(1, 1, "zeros"), (2, 0, "zeros"), (1, 1, "edge")])
def test_conv_gradients(stride, pad, mode):
    x, w, b = rand(2, 3, 6, 6), rand(4, 3, 3 if pad else 2, 3 if pad else 2, seed=1), rand(4, seed=2)
    fn = lambda: T.tsum(T.conv2d(x, w, b, stride=stride, padding=pad, pad_mode=mode) ** 2)
    assert check_gradients(fn, [x, w, b]) < 1e-5


def test_shape_op_gradients():
    x = rand(2, 3, 4, 4)
    fn = lambda: T.tsum(T.upsample_bilinear(T.upsample_nearest(x, 2), 2)[:, 1:, ::2] ** 2
                        + 0.0) + T.tsum(T.concat([x, x * 2.0], axis=1) ** 3)
    assert check_gradients(fn, [x]) < 1e-5
    y = rand(5, 3)
    fn = lambda: T.tsum(T.gather_rows(y, np.array([4, 0, 2])) ** 2) + T.tsum(T.stack([y, y], 1) ** 3)
    assert check_gradients(fn, [y]) < 1e-5


def test_edge_padding_keeps_constants():
    x = T.Tensor(np.full((1, 2, 5, 5), 3.0))
    w = np.random.default_rng(0).normal(size=(3, 2, 3, 3))
    out = T.conv2d(x, w, padding=1, pad_mode="edge").data
    assert np.allclose(out, out[:, :, :1, :1], rtol=0, atol=1e-12)


def test_matmul_counts_and_errors():
    a, b = np.ones((3, 4, 5)), np.ones((5, 6))
    with T.counting() as c:
        T.matmul(a, b)
    assert c.count == 3 * 4 * 5 * 6
    with pytest.raises(DimensionError, match="inner"):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 2, 5, 4)), np.ones((3, 2, 2, 2)), stride=2)


def test_backward_is_deterministic_and_scalar_only():
    x = rand(4, 4)
    with Tape() as tape:
        y = T.tsum(T.gelu(x @ x) * x)
    g1 = backward(tape, y)[x]
    g2 = backward(tape, y)[x]
    assert np.array_equal(g1, g2)
    with Tape() as tape:
        z = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, z)


def test_no_record_skips_tape():
    x = rand(3)
    with Tape() as tape:
        with T.no_record():
            x * 2.0
        x * 3.0
    assert len(tape.nodes) == 1


def test_f32_default_dtype():
    with T.default_dtype(np.float32):
        assert T.Tensor([1.0, 2.0]).data.dtype == np.float32
    assert T.Tensor([1.0]).data.dtype == np.float64


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_add_mul_match_numpy(a, b):
    assert np.array_equal((T.Tensor(a) + b).data, a + b)
    assert np.array_equal((T.Tensor(a) * b).data, a * b)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_lastdim(x).data
    assert np.allclose(s.sum(-1), 1.0) and (s >= 0).all()


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_vjp_is_adjoint(a, b):
    # <J v, u> == <v, J^T u> for the bilinear map
    A, B = T.parameter(a), T.parameter(b)
    u = np.random.default_rng(0).normal(size=(4, 2))
    with Tape() as tape:
        out = T.tsum(T.matmul(A, B) * u)
    g = backward(tape, out)
    assert np.allclose(g[A], u @ b.T) and np.allclose(g[B], a.T @ u)
