import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualsync.errors import ContractError, DimensionError, NumericalError
from dualsync.numerics import (Graph, Tensor, concat, exp, gelu, getitem, huber, jacobi_eigh, layernorm,
                               log, matmul, mean, psd_sqrt, psd_sqrt_with_clamp, sigmoid, silu, softmax,
                               square, swapaxes, tanh, tsum)
from dualsync.numerics.gradcheck import numeric_gradient, relative_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = fn(*ts)
        return g.backward(out, ts)


def fd_of(fn, *arrays, h=1e-5):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    return [numeric_gradient(lambda: fn(*[Tensor(x) for x in arrays]).item(), a, h) for a in arrays]


def assert_grads_match(fn, *arrays, tol=1e-6):
    an = grad_of(fn, *arrays)
    fd = fd_of(fn, *arrays)
    for a, f in zip(an, fd):
        assert relative_error(f, a).max() <= tol


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((a @ Tensor(np.array([[0.0], [1.0]]))).data, [[2.0], [4.0]])
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ga, gb = grad_of(lambda x, y: tsum(x @ y), a, b)
    assert np.allclose(ga, np.ones((5, 3)) @ b.T, atol=1e-14)
    assert_grads_match(lambda x, y: tsum(x @ y), a, b)


def test_batched_matmul_gradient(rng):
    assert_grads_match(lambda x, y: tsum(square(x @ y)), rng.standard_normal((2, 3, 4)),
                       rng.standard_normal((4, 5)))


@pytest.mark.parametrize("op", [exp, tanh, sigmoid, silu, gelu, square, lambda x: log(exp(x) + 1.0)])
def test_elementwise_gradients(op, rng):
    assert_grads_match(lambda x: tsum(op(x) * x), rng.standard_normal((3, 4)))


def test_broadcast_arithmetic_gradients(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
    assert_grads_match(lambda x, y: tsum((x + y) * (x - y) / (y * y + 1.0)), a, b)


def test_shape_op_gradients(rng):
    a = rng.standard_normal((2, 3, 4))
    assert_grads_match(lambda x: tsum(square(swapaxes(x, 1, 2).reshape(2, 12)) * np.arange(24.).reshape(2, 12)), a)
    assert_grads_match(lambda x: tsum(square(getitem(x, (slice(None), slice(1, 3)))) ), a)
    assert_grads_match(lambda x: tsum(square(concat([x, x * 2.0], axis=-1))), a)
    assert_grads_match(lambda x: tsum(square(mean(x, axis=1))), a)


def test_softmax_examples():
    assert softmax(Tensor(np.array([5.0]))).data[0] == 1.0
    assert np.allclose(softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=1e-15)
    out = softmax(Tensor(np.array([1000.0, 0.0]))).data
    # extended-precision reference
    ref = np.exp(np.longdouble(-1000.0))
    assert out[0] == pytest.approx(float(1 / (1 + ref)), abs=1e-300)
    assert out[1] == pytest.approx(float(ref / (1 + ref)), abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_a_distribution(x):
    out = softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradient(rng):
    w = rng.standard_normal((3, 5))
    assert_grads_match(lambda x: tsum(softmax(x, axis=-1) * w), rng.standard_normal((3, 5)))


def test_layernorm_examples(rng):
    assert np.allclose(layernorm(Tensor(np.full((1, 4), 2.5))).data, 0.0)
    assert np.allclose(layernorm(Tensor(np.array([1.0, 3.0])), eps=1e-12).data, [-1.0, 1.0], atol=1e-10)
    out = layernorm(Tensor(rng.standard_normal((4, 8)) * 3 + 1)).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-12
    assert np.all(out.var(axis=-1) <= 1.0) and np.all(out.var(axis=-1) > 1.0 - 1e-4)


def test_layernorm_gradient(rng):
    w = rng.standard_normal((4, 6))
    assert_grads_match(lambda x, g, b: tsum(layernorm(x, g, b) * w), rng.standard_normal((4, 6)),
                       rng.standard_normal(6), rng.standard_normal(6))


def test_huber_values_and_knee():
    d = 0.7
    val = lambda e: huber(Tensor(np.array([e])), d).data[0]
    assert val(0.0) == 0.0
    assert val(d) == pytest.approx(d * d / 2, abs=1e-15)
    assert val(3 * d) == pytest.approx(2.5 * d * d, abs=1e-15)
    # value and derivative continuous across the knee
    lo, hi = val(d - 1e-9), val(d + 1e-9)
    assert abs(hi - lo) < 1e-8
    g = lambda e: grad_of(lambda x: tsum(huber(x, d)), np.array([e]))[0][0]
    assert abs(g(d - 1e-9) - g(d + 1e-9)) < 1e-8


def test_backward_examples(rng):
    x = rng.standard_normal((3, 2))
    assert np.array_equal(grad_of(lambda t: tsum(t), x)[0], np.ones((3, 2)))
    assert np.allclose(grad_of(lambda t: tsum(square(t)), x)[0], 2 * x)
    with pytest.raises(ContractError):
        t = Tensor(x, requires_grad=True)
        with Graph() as g:
            g.backward(t * 2.0)


def test_non_finite_is_an_error():
    with pytest.raises(NumericalError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NumericalError):
        exp(Tensor(np.array([1e4])))


def test_leaf_grad_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        g.backward(tsum(x * x))
    with Graph() as g:
        g.backward(tsum(x * 3.0))
    assert np.allclose(x.grad, [5.0, 7.0])


def test_psd_sqrt_examples(rng):
    assert np.allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    a = rng.standard_normal((5, 5))
    m = a.T @ a
    s = psd_sqrt(m)
    assert np.linalg.norm(s @ s - m) <= 1e-8 * (1 + np.linalg.norm(m))
    with pytest.raises(DimensionError):
        psd_sqrt(np.ones((2, 3)))


def test_psd_sqrt_clamps_negative_noise():
    m = np.diag([1.0, -1e-12])
    s, clamp = psd_sqrt_with_clamp(m)
    assert clamp == pytest.approx(1e-12)
    assert np.allclose(s, np.diag([1.0, 0.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_psd_sqrt_recovers_root(d, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((d, d))
    s = a @ a.T + 0.1 * np.eye(d)          # symmetric PSD
    back = psd_sqrt(s @ s)
    assert np.linalg.norm(back - s) <= 1e-6 * np.linalg.norm(s)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31 - 1))
def test_jacobi_matches_reference(d, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((d, d))
    m = a + a.T
    w, v = jacobi_eigh(m)
    assert np.allclose(w, np.linalg.eigvalsh(m), atol=1e-10 * (1 + np.abs(w).max()))
    assert np.allclose(v @ np.diag(w) @ v.T, m, atol=1e-10 * (1 + np.abs(m).max()))
    assert np.allclose(v.T @ v, np.eye(d), atol=1e-12)


def test_operations_are_deterministic(rng):
    x = rng.standard_normal((4, 6))
    f = lambda: layernorm(Tensor(x) @ Tensor(x.T)).data
    assert np.array_equal(f(), f())
