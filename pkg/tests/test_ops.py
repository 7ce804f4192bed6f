import math

import numpy as np
import pytest

from ulmv import ops
from ulmv.tensor import Tensor

from reference import conv1d_causal_loops, conv2d_loops, matmul_loops


class TestConv2d:
    def test_identity_kernel_single_channel(self, rng):
        x = rng.standard_normal((2, 1, 5, 6))
        out = ops.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out.data, x)

    def test_identity_kernel_sums_over_input_channels(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        out = ops.conv2d(x, np.ones((1, 3, 1, 1)), np.zeros(1))
        np.testing.assert_allclose(out.data[:, 0], x.sum(axis=1), atol=1e-15)

    def test_zero_input_gives_bias(self, rng):
        out = ops.conv2d(np.zeros((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)),
                         np.array([1.0, -2.0, 0.5, 3.0]), padding=1)
        np.testing.assert_array_equal(out.data, np.broadcast_to([1.0, -2.0, 0.5, 3.0], (2, 6, 6, 4))
                                      .transpose(0, 3, 1, 2))

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 0, 1), (1, 3, 3), (2, 2, 2)])
    def test_matches_six_loop_oracle(self, rng, stride, padding, dilation):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ops.conv2d(x, w, b, stride, padding, dilation).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding, dilation), rtol=0, atol=1e-12)

    def test_output_size_formula(self):
        out = ops.conv2d(np.zeros((1, 1, 11, 8)), np.zeros((1, 1, 3, 3)), None, stride=2, padding=1)
        assert out.shape[2:] == ((11 + 2 - 2 - 1) // 2 + 1, (8 + 2 - 2 - 1) // 2 + 1)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None)


class TestConv1dCausal:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 7))
        w = np.zeros((3, 1, 4))
        w[:, 0, -1] = 1.0
        np.testing.assert_array_equal(ops.conv1d_causal(x, w, np.zeros(3)).data, x)

    def test_hand_sum(self):
        out = ops.conv1d_causal(np.array([[[1.0, 2.0, 3.0]]]), np.array([[[1.0, 1.0]]]), np.zeros(1))
        np.testing.assert_array_equal(out.data, [[[1.0, 3.0, 5.0]]])

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 9))
        w = rng.standard_normal((3, 1, 4))
        b = rng.standard_normal(3)
        np.testing.assert_allclose(ops.conv1d_causal(x, w, b).data, conv1d_causal_loops(x, w, b), atol=1e-12)

    def test_kernel_longer_than_sequence(self, rng):
        x = rng.standard_normal((1, 2, 3))
        w = rng.standard_normal((2, 1, 6))
        np.testing.assert_allclose(ops.conv1d_causal(x, w, np.zeros(2)).data,
                                   conv1d_causal_loops(x, w, np.zeros(2)), atol=1e-12)

    def test_causality(self, rng):
        x = rng.standard_normal((1, 2, 10))
        w = rng.standard_normal((2, 1, 3))
        base = ops.conv1d_causal(x, w, None).data
        x2 = x.copy()
        x2[:, :, 6] += 1.0
        changed = np.any(ops.conv1d_causal(x2, w, None).data != base, axis=(0, 1))
        assert not changed[:6].any()

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            ops.conv1d_causal(np.zeros((1, 1, 3)), np.zeros((1, 1, 0)), None)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(ops.linear(x, np.eye(4), np.zeros(4)).data, x)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(ops.linear(np.array([1.0, 1.0]), np.array([[2.0, 3.0]]),
                                                 np.array([1.0])).data, [6.0])

    def test_matches_double_loop(self, rng):
        x = rng.standard_normal((6, 5))
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(ops.linear(x, w, b).data, matmul_loops(x, w) + b, atol=1e-12)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.linear(np.zeros((2, 3)), np.zeros((4, 5)))


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = ops.layer_norm(np.full((2, 5), 3.0), np.ones(5), np.zeros(5))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_already_normalised(self):
        out = ops.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_moments(self, rng):
        out = ops.layer_norm(rng.standard_normal((4, 32)) * 5 + 2, np.ones(32), np.zeros(32)).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ops.layer_norm(np.zeros(3), np.ones(3), np.zeros(3), eps=0.0)


class TestActivations:
    def test_values_at_zero(self):
        assert ops.sigmoid(np.array(0.0)).data == 0.5
        assert ops.silu(np.array(0.0)).data == 0.0
        assert ops.softplus(np.array(0.0)).data == pytest.approx(0.693147, abs=1e-6)
        assert ops.relu(np.array(-1.0)).data == 0.0

    def test_sigmoid_saturates(self):
        s = ops.sigmoid(np.array([50.0, -50.0])).data
        assert abs(s[0] - 1.0) < 1e-15 and abs(s[1]) < 1e-15

    def test_softplus_switches_to_identity(self):
        x = np.array([30.5, 1e4])
        np.testing.assert_array_equal(ops.softplus(x).data, x)
        assert abs(ops.softplus(np.array(30.0)).data - 30.0) < 1e-12

    def test_silu_definition(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_allclose(ops.silu(x).data, x * ops.sigmoid(x).data, rtol=1e-15)

    @pytest.mark.parametrize("fn,exact", [
        (ops.sigmoid, lambda v: 1 / (1 + math.exp(-v)) * (1 - 1 / (1 + math.exp(-v)))),
        (ops.silu, lambda v: (1 / (1 + math.exp(-v))) * (1 + v * (1 - 1 / (1 + math.exp(-v))))),
        (ops.softplus, lambda v: 1 / (1 + math.exp(-v))),
    ])
    def test_derivative_matches_central_difference(self, rng, fn, exact):
        h = 1e-5
        for v in rng.uniform(-4, 4, 8):
            x = Tensor(np.array([v]), requires_grad=True)
            from ulmv.tensor import backward
            backward(fn(x))
            fd = (fn(np.array([v + h])).data[0] - fn(np.array([v - h])).data[0]) / (2 * h)
            assert abs(x.grad[0] - fd) < 1e-7
            assert abs(x.grad[0] - exact(v)) < 1e-12


class TestPooling:
    def test_constant_map(self):
        x = np.full((1, 2, 4, 4), 3.5)
        np.testing.assert_array_equal(ops.max_pool2d(x).data, np.full((1, 2, 2, 2), 3.5))
        np.testing.assert_array_equal(ops.adaptive_avg_pool2d(x).data, np.full((1, 2, 1, 1), 3.5))

    def test_two_by_two(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert ops.max_pool2d(x).data.item() == 4.0
        assert ops.adaptive_avg_pool2d(x).data.item() == 2.5
        assert ops.global_avg_pool(x).data.shape == (1, 1)

    def test_adaptive_equals_explicit_mean(self, rng):
        x = rng.standard_normal((2, 3, 7, 5))
        np.testing.assert_allclose(ops.adaptive_avg_pool2d(x).data[:, :, 0, 0],
                                   x.sum(axis=(2, 3)) / 35, atol=1e-12)

    def test_max_pool_floors_odd_extents(self, rng):
        x = rng.standard_normal((1, 1, 7, 5))
        out = ops.max_pool2d(x).data
        assert out.shape == (1, 1, 3, 2)
        assert out[0, 0, 2, 1] == x[0, 0, 4:6, 2:4].max()


class TestBatchNorm:
    def test_training_updates_running_statistics(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
        rm, rv = np.zeros(2), np.ones(2)
        out = ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-12)

    def test_eval_uses_running_statistics(self, rng):
        x = rng.standard_normal((2, 2, 2, 2))
        rm, rv = np.array([0.5, -0.5]), np.array([4.0, 0.25])
        out = ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=False).data
        np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))
