import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gliograde import tensor as T
from gliograde.errors import ContractError, GraphError, ShapeError
from gliograde.rng import STREAMS, rng_stream
from gliograde.tensor import Tensor, no_grad
from gradcheck import assert_gradients

CONFIGS = range(10)


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_gradients_accumulate_over_paths():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0 + x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2 + 6 + 1])


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0, -1.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6, 6])
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_root_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_root_without_grad_is_rejected():
    with pytest.raises(ContractError):
        Tensor([1.0]).sum().backward()


def test_cycle_is_detected():
    a = Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = b * 3.0
    b._parents = (c,)
    with pytest.raises(GraphError):
        c.sum().backward()


def test_graph_released_after_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_retain_graph_allows_second_pass():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_array_equal(x.grad, [4, 8])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_thread_local():
    seen = []
    x = Tensor([1.0], requires_grad=True)

    def worker():
        seen.append((x * 2.0).requires_grad)

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [True]


def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_pad_example():
    np.testing.assert_array_equal(T.pad(Tensor([1.0, 2.0]), [(1, 1)]).data, [0, 1, 2, 0])


def test_concat_example():
    a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1)))
    assert T.concat([a, b], axis=1).shape == (2, 2)


def test_reduce_mean_example():
    assert T.reduce_mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0


@pytest.mark.parametrize(
    "fn, a, b",
    [
        (T.add, (2, 3), (4, 3)),
        (T.mul, (2, 3), (2, 4)),
        (T.matmul, (2, 3), (4, 5)),
        (lambda x, y: T.concat([x, y], axis=0), (2, 3), (2, 4)),
    ],
)
def test_shape_errors_carry_both_shapes(fn, a, b):
    with pytest.raises(ShapeError) as info:
        fn(Tensor(np.ones(a)), Tensor(np.ones(b)))
    assert str(a) in str(info.value) and str(b) in str(info.value)


def test_matmul_needs_matrices():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones(3)))


def _shapes(rng, ndim):
    return tuple(int(n) for n in rng.integers(1, 4, ndim))


@pytest.mark.parametrize("config", CONFIGS)
def test_gradcheck_elementwise(config):
    rng = np.random.default_rng(config)
    shape = _shapes(rng, 3)
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape)
    assert_gradients(T.add, [a, b], config)
    assert_gradients(T.sub, [a, b], config)
    assert_gradients(T.mul, [a, b], config)
    assert_gradients(T.div, [a, np.abs(b) + 0.5], config)
    assert_gradients(T.neg, [a], config)
    assert_gradients(T.exp, [a], config)
    assert_gradients(T.log, [np.abs(a) + 0.5], config)
    assert_gradients(T.sqrt, [np.abs(a) + 0.5], config)
    assert_gradients(lambda x: T.power(x, 3.0), [a], config)


@pytest.mark.parametrize("config", CONFIGS)
def test_gradcheck_broadcasting(config):
    rng = np.random.default_rng(100 + config)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((3, 1))
    assert_gradients(T.add, [a, b], config)
    assert_gradients(T.mul, [a, b], config)
    assert_gradients(T.div, [a, np.abs(b) + 0.5], config)


@pytest.mark.parametrize("config", CONFIGS)
def test_gradcheck_matmul(config):
    rng = np.random.default_rng(200 + config)
    n, k, m = (int(v) for v in rng.integers(1, 5, 3))
    assert_gradients(T.matmul, [rng.standard_normal((n, k)), rng.standard_normal((k, m))], config)
    assert_gradients(T.matmul, [rng.standard_normal((2, n, k)), rng.standard_normal((2, k, m))], config)


@pytest.mark.parametrize("config", CONFIGS)
def test_gradcheck_shape_ops(config):
    rng = np.random.default_rng(300 + config)
    a = rng.standard_normal((2, 3, 4))
    assert_gradients(lambda x: T.reshape(x, (4, 6)), [a], config)
    assert_gradients(lambda x: T.transpose(x, (2, 0, 1)), [a], config)
    axis = int(rng.integers(3))
    other = rng.standard_normal(tuple(2 if i == axis else n for i, n in enumerate(a.shape)))
    assert_gradients(lambda x, y: T.concat([x, y], axis=axis), [a, other], config)
    lo = int(rng.integers(0, 2))
    assert_gradients(lambda x: T.slice_(x, (slice(None), slice(lo, lo + 2), slice(None, None, 2))), [a], config)
    assert_gradients(lambda x: T.slice_(x, (np.array([0, 1, 1]),)), [a], config)
    widths = [tuple(int(v) for v in rng.integers(0, 3, 2)) for _ in range(3)]
    assert_gradients(lambda x: T.pad(x, widths, value=1.5), [a], config)


@pytest.mark.parametrize("config", CONFIGS)
def test_gradcheck_reductions(config):
    rng = np.random.default_rng(400 + config)
    a = rng.standard_normal((2, 3, 4))
    axis = [None, 0, 1, 2, (0, 2)][config % 5]
    keepdims = bool(config % 2)
    assert_gradients(lambda x: T.reduce_sum(x, axis, keepdims), [a], config)
    assert_gradients(lambda x: T.reduce_mean(x, axis, keepdims), [a], config)


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4), elements=st.floats(-10, 10)))
def test_forward_matches_numpy(a):
    t = Tensor(a)
    np.testing.assert_array_equal((t * t + t).data, a * a + a)
    np.testing.assert_allclose(T.reduce_sum(t).data, a.sum())
    np.testing.assert_array_equal(T.reshape(t, (-1,)).data, a.reshape(-1))


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4), elements=st.floats(-10, 10)))
def test_gradient_shapes_match_data(a):
    x = Tensor(a, requires_grad=True)
    (T.exp(x * 0.1) * x).sum().backward()
    assert x.grad.shape == x.shape
    assert np.all(np.isfinite(x.grad))


def test_backward_is_bit_reproducible():
    rng = np.random.default_rng(7)
    data = rng.standard_normal((5, 5)).astype(np.float32)
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        y = T.matmul(x, x) + x * 3.0
        (T.exp(y * 0.01)).sum().backward()
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_rng_streams_are_reproducible_and_distinct():
    a = rng_stream(5, "init").random(4)
    b = rng_stream(5, "init").random(4)
    c = rng_stream(5, "dropout").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(STREAMS) == {"init", "patch-sampling", "augmentation", "dropout", "phantom"}


def test_rng_rejects_unknown_stream_and_bad_seed():
    with pytest.raises(ValueError):
        rng_stream(0, "weights")
    with pytest.raises(ValueError):
        rng_stream(-1, "init")
    with pytest.raises(ValueError):
        rng_stream(2**64, "init")
