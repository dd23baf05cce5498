"""Primitive kernel contracts: shapes, algebraic identities, oracle twins."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canet import kernels as K
from canet.errors import ShapeError

from oracles import random_conv_case

rng = np.random.default_rng(1234)


class TestLayout:
    def test_flat_index_matches_row_major_storage(self):
        dims = (2, 3, 4, 5, 6)
        x = np.arange(np.prod(dims), dtype=np.float64).reshape(dims)
        flat = x.reshape(-1)
        for _ in range(50):
            idx = tuple(int(rng.integers(0, d)) for d in dims)
            assert flat[K.flat_index(dims, *idx)] == x[idx]

    def test_video_dims_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            K.video_dims(np.zeros((2, 3, 4)))


class TestConv3d:
    def test_pointwise_identity_scalar(self):
        x = np.ones((1, 1, 1, 1, 1))
        k = K.ConvKernel(np.ones((1, 1, 1, 1, 1)), np.zeros(1))
        assert K.conv3d(x, k)[0, 0, 0, 0, 0] == 1.0

    def test_time_constant_input_depthwise_sums_taps(self):
        x = np.broadcast_to(rng.standard_normal((1, 1, 4, 4, 3)),
                            (1, 6, 4, 4, 3)).copy()
        taps = np.array([0.3, -1.1, 0.7])
        w = np.zeros((3, 1, 3, 1, 1))
        w[:, 0, :, 0, 0] = taps
        k = K.ConvKernel(w, None, groups=3)  # zero temporal padding
        y = K.conv3d(x, k)
        assert y.shape[1] == 4
        np.testing.assert_allclose(y, taps.sum() * x[:, :4], rtol=1e-12)

    def test_identity_weight_matrix_reproduces_input(self):
        x = rng.standard_normal((2, 3, 4, 4, 5))
        k = K.ConvKernel(np.eye(5).reshape(5, 5, 1, 1, 1), np.zeros(5))
        np.testing.assert_array_equal(K.conv3d_oracle(x, k), x)

    def test_zero_weights_give_bias_everywhere(self):
        x = rng.standard_normal((1, 2, 3, 3, 4))
        bias = rng.standard_normal(6)
        k = K.ConvKernel(np.zeros((6, 4, 1, 1, 1)), bias)
        y = K.conv3d_oracle(x, k)
        np.testing.assert_allclose(y, np.broadcast_to(bias, y.shape), rtol=1e-15)

    def test_channel_mismatch_raises(self):
        x = np.zeros((1, 2, 3, 3, 4))
        k = K.ConvKernel(np.zeros((2, 5, 1, 1, 1)), None)
        with pytest.raises(ShapeError):
            K.conv3d(x, k)
        with pytest.raises(ShapeError):
            K.conv3d_oracle(x, k)

    def test_vanishing_output_dim_raises(self):
        x = np.zeros((1, 2, 3, 3, 1))
        k = K.ConvKernel(np.zeros((1, 1, 3, 1, 1)), None, dilation=(2, 1, 1))
        with pytest.raises(ShapeError):
            K.conv3d(x, k)

    def test_matches_oracle_on_spec_case(self):
        x = rng.standard_normal((2, 4, 5, 5, 6))
        k = K.ConvKernel(0.5 * rng.standard_normal((4, 6, 3, 3, 3)),
                         0.5 * rng.standard_normal(4), padding=(1, 1, 1))
        np.testing.assert_allclose(K.conv3d(x, k), K.conv3d_oracle(x, k),
                                   atol=1e-12)

    def test_matches_oracle_on_randomized_geometries(self):
        case_rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(50):
            x, k = random_conv_case(case_rng)
            delta = np.abs(K.conv3d(x, k) - K.conv3d_oracle(x, k)).max()
            worst = max(worst, float(delta))
        assert worst <= 1e-12

    def test_float32_stays_close_to_oracle(self):
        case_rng = np.random.default_rng(99)
        for _ in range(8):
            x, k = random_conv_case(case_rng, dtype=np.float32)
            fast = K.conv3d(x, k)
            ref = K.conv3d_oracle(x.astype(np.float64), K.ConvKernel(
                k.weights.astype(np.float64),
                None if k.bias is None else k.bias.astype(np.float64),
                k.groups, k.stride, k.dilation, k.padding))
            scale = max(1.0, np.abs(ref).max())
            assert np.abs(fast - ref).max() / scale <= 1e-5

    def test_outputs_finite_at_contract_extremes(self):
        x = 1e3 * np.sign(rng.standard_normal((1, 3, 4, 4, 8)))
        k = K.ConvKernel(10.0 * np.sign(rng.standard_normal((8, 8, 3, 3, 3))),
                         10.0 * np.ones(8), padding=(1, 1, 1))
        assert np.isfinite(K.conv3d(x, k)).all()


class TestTemporalDiff:
    def test_linear_ramp(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1, 1)
        np.testing.assert_array_equal(
            K.temporal_diff(x).ravel(), [1.0, 1.0, 1.0, 0.0])

    @given(st.integers(1, 6), st.floats(-10, 10))
    @settings(max_examples=25, deadline=None)
    def test_time_constant_maps_to_zero(self, frames, value):
        x = np.full((1, frames, 2, 2, 3), value)
        assert not K.temporal_diff(x).any()

    def test_matches_reference_loop(self):
        x = rng.standard_normal((2, 8, 3, 3, 4))
        ref = np.zeros_like(x)
        for t in range(7):
            ref[:, t] = x[:, t + 1] - x[:, t]
        np.testing.assert_array_equal(K.temporal_diff(x), ref)


class TestPools:
    def test_channel_pool_single_channel(self):
        x = rng.standard_normal((1, 2, 3, 3, 1))
        y = K.channel_pool(x)
        np.testing.assert_array_equal(y[..., 0], x[..., 0])
        np.testing.assert_array_equal(y[..., 1], x[..., 0])

    def test_channel_pool_arithmetic(self):
        x = np.broadcast_to(np.arange(4.0), (1, 2, 3, 3, 4)).copy()
        y = K.channel_pool(x)
        assert (y[..., 0] == 1.5).all() and (y[..., 1] == 3.0).all()

    def test_channel_pool_matches_reduction_loop(self):
        x = rng.standard_normal((2, 3, 4, 4, 6))
        y = K.channel_pool(x)
        for idx in np.ndindex(2, 3, 4, 4):
            assert y[idx + (0,)] == pytest.approx(x[idx].mean(), abs=1e-14)
            assert y[idx + (1,)] == x[idx].max()

    def test_spatial_pool_identity_when_plane_is_single_site(self):
        x = rng.standard_normal((2, 3, 1, 1, 4))
        np.testing.assert_array_equal(K.spatial_pool(x), x)

    def test_spatial_pool_checkerboard_averages_to_one(self):
        x = np.indices((4, 4)).sum(axis=0) % 2 * 2.0
        x = np.broadcast_to(x[None, None, :, :, None], (1, 2, 4, 4, 3)).copy()
        np.testing.assert_allclose(K.spatial_pool(x), 1.0)

    def test_spatial_pool_matches_mean_loop(self):
        x = rng.standard_normal((1, 2, 5, 3, 4))
        y = K.spatial_pool(x)
        for n, t, c in np.ndindex(1, 2, 4):
            assert y[n, t, 0, 0, c] == pytest.approx(x[n, t, :, :, c].mean(),
                                                     abs=1e-14)


class TestConcatSplit:
    def test_concat_of_one_is_identity(self):
        x = rng.standard_normal((1, 2, 3, 3, 4))
        np.testing.assert_array_equal(K.concat_channels([x]), x)

    def test_concat_then_split_roundtrip_bit_exact(self):
        a = rng.standard_normal((1, 2, 3, 3, 2))
        b = rng.standard_normal((1, 2, 3, 3, 6))
        both = K.concat_channels([a, b])
        np.testing.assert_array_equal(both[..., :2], a)
        np.testing.assert_array_equal(both[..., 2:], b)

    @given(st.integers(1, 3), st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_split_then_concat_is_identity(self, frames, group_width):
        x = np.random.default_rng(frames * 7 + group_width) \
            .standard_normal((1, frames, 2, 2, 4 * group_width))
        parts = K.split_channels(x, 4)
        assert all(p.shape[-1] == group_width for p in parts)
        np.testing.assert_array_equal(K.concat_channels(parts), x)

    def test_quarter_concat_index_mapping(self):
        parts = [np.full((1, 1, 1, 1, 2), float(i)) for i in range(4)]
        merged = K.concat_channels(parts)
        for c in range(8):
            assert merged[0, 0, 0, 0, c] == c // 2  # input index = floor(4c/C)

    def test_concat_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            K.concat_channels([np.zeros((1, 2, 3, 3, 1)),
                               np.zeros((1, 2, 3, 4, 1))])
        with pytest.raises(ShapeError):
            K.concat_channels([])

    def test_split_requires_divisible_channels(self):
        with pytest.raises(ShapeError):
            K.split_channels(np.zeros((1, 1, 1, 1, 6)), 4)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert K.sigmoid(np.zeros(1))[0] == 0.5

    def test_sigmoid_finite_at_extremes(self):
        y = K.sigmoid(np.array([-1e3, 1e3]))
        assert np.isfinite(y).all() and 0.0 <= y[0] and y[1] <= 1.0

    @given(st.integers(1, 9))
    @settings(max_examples=20, deadline=None)
    def test_softmax_of_equal_logits_is_uniform(self, n):
        w = K.softmax(np.full(n, 3.7))
        np.testing.assert_allclose(w, 1.0 / n, rtol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_is_probability_vector(self, logits):
        v = np.array(logits)
        w = K.softmax(v)
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) <= 1e-12
        top, runner_up = np.sort(v)[::-1][:2]
        if top - runner_up > 1e-6:  # argmax only transfers for a strict max
            assert w.argmax() == v.argmax()

    def test_softmax_shift_invariance_bitwise(self):
        v = np.array([0.5, 0.25, -0.75, 1.5])
        for shift in (2.0, -4.0, 64.0):
            np.testing.assert_array_equal(K.softmax(v), K.softmax(v + shift))

    def test_softmax_rejects_matrices(self):
        with pytest.raises(ShapeError):
            K.softmax(np.zeros((2, 2)))

    def test_suppressed_attention_recalibration_is_identity(self):
        x = rng.standard_normal((1, 3, 4, 4, 6))
        attention = K.sigmoid(np.full_like(x, -30.0))
        out = K.add(K.hadamard(attention, x), x)
        assert np.abs(out - x).max() <= 1e-9

    def test_hadamard_broadcast_patterns(self):
        a = rng.standard_normal((2, 3, 4, 4, 5))
        spatial_shared = rng.standard_normal((2, 3, 1, 1, 5))
        channel_shared = rng.standard_normal((2, 3, 4, 4, 1))
        np.testing.assert_array_equal(K.hadamard(a, spatial_shared),
                                      a * spatial_shared)
        np.testing.assert_array_equal(K.hadamard(a, channel_shared),
                                      a * channel_shared)

    def test_hadamard_rejects_other_shapes(self):
        a = np.zeros((2, 3, 4, 4, 5))
        for bad in (np.zeros((2, 3, 4, 1, 5)), np.zeros((1, 3, 1, 1, 5)),
                    np.zeros((2, 3, 4, 4, 2))):
            with pytest.raises(ShapeError):
                K.hadamard(a, bad)
            with pytest.raises(ShapeError):
                K.add(a, bad)

    def test_scale_and_blend(self):
        x = rng.standard_normal((1, 2, 2, 2, 3))
        np.testing.assert_array_equal(K.scale(x, 2.5), 2.5 * x)
        parts = [rng.standard_normal(x.shape) for _ in range(3)]
        w = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(K.blend(parts, w),
                                   sum(wi * p for wi, p in zip(w, parts)),
                                   rtol=1e-14)
        with pytest.raises(ShapeError):
            K.blend(parts, np.array([1.0, 2.0]))
