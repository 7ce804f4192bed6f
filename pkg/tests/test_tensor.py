import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ulmv import ops, tensor as T
from ulmv.gradcheck import check_gradient, op_cases
from ulmv.tensor import NonFiniteError, Tensor, backward, no_grad


def test_sum_of_squares_gradient_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_unused_leaf_gets_zero_gradient(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal(5), requires_grad=True)
    backward(T.sum(T.exp(x)))
    np.testing.assert_array_equal(unused.grad, np.zeros(5))


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_two_backward_passes_accumulate_exactly_twice(rng):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = rng.standard_normal((5, 3))

    def loss():
        return T.sum(ops.sigmoid(ops.linear(x, w)) ** 2.0)

    backward(loss())
    once = w.grad.copy()
    backward(loss())
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_shared_leaf_accumulates_across_uses(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    backward(T.sum(x * 3.0 + x * 5.0))
    np.testing.assert_allclose(x.grad, np.full(4, 8.0))


def test_each_node_visited_once_on_diamond_graph():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y  # y reached via two paths
    backward(T.sum(z))
    assert x.grad[0] == 8.0


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([-1.0]), requires_grad=True))


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with no_grad():
        y = T.exp(x)
    assert y.node is None and not y.requires_grad


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    a1 = ops.conv2d(x, w, b, padding=1).data
    a2 = ops.conv2d(x, w, b, padding=1).data
    assert a1.tobytes() == a2.tobytes()


@pytest.mark.parametrize("case", op_cases(np.random.default_rng(7)), ids=lambda c: c[0])
def test_op_gradient_matches_finite_differences(case):
    name, fn, inputs = case
    assert check_gradient(fn, inputs) < 1e-5, name


def test_perturbed_backward_is_detected(rng):
    fn = ops.sigmoid
    inputs = [rng.standard_normal(6)]
    with T.perturb_backward("sigmoid", 1.01):
        assert check_gradient(fn, inputs) > 1e-5


@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.sampled_from([1, 2, 4, 8, 12]),
                                    st.integers(1, 3), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6)),
       st.sampled_from([1, 2, 4]))
def test_concat_split_round_trip_is_bit_exact(x, parts):
    if x.shape[1] % parts:
        with pytest.raises(ValueError):
            ops.split_channels(Tensor(x), parts)
        return
    pieces = ops.split_channels(Tensor(x), parts)
    assert all(p.shape[1] == x.shape[1] // parts for p in pieces)
    assert ops.concat_channels(pieces).data.tobytes() == np.ascontiguousarray(x).tobytes()


def test_split_channels_examples(rng):
    x = Tensor(rng.standard_normal((1, 8, 2, 2)))
    parts = ops.split_channels(x, 4)
    assert [p.shape for p in parts] == [(1, 2, 2, 2)] * 4
    single = ops.split_channels(x, 1)
    assert len(single) == 1 and single[0] is x
    with pytest.raises(ValueError):
        ops.split_channels(x, 3)
