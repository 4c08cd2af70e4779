import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmpcnn import layers
from hmpcnn.layers import (ConvBlock, ConvLayerWeights, FeatureStack, conv_block_forward,
                           conv_layer_forward, local_max_pool, output_layer, subsample)


def stack(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return FeatureStack(arr)


class TestConvLayer:
    def test_all_ones_filter_with_boundary_truncation(self):
        w = ConvLayerWeights(np.ones((2, 2, 1, 1)), np.zeros(1))
        out = conv_layer_forward(stack(np.ones((2, 2))), w)
        assert np.array_equal(out.values[:, :, 0], [[4.0, 2.0], [2.0, 1.0]])

    def test_zero_filter_gives_constant_bias(self):
        w = ConvLayerWeights(np.zeros((3, 3, 1, 2)), np.array([0.7, -0.2]))
        out = conv_layer_forward(stack(np.random.default_rng(0).uniform(0, 1, (5, 4))), w)
        assert np.allclose(out.values[:, :, 0], 0.7)
        assert np.allclose(out.values[:, :, 1], 0.0)  # relu clips the negative bias

    def test_negative_filter_killed_by_relu(self):
        w = ConvLayerWeights(np.full((1, 1, 1, 1), -1.0), np.zeros(1))
        out = conv_layer_forward(stack(np.random.default_rng(1).uniform(0, 1, (4, 4))), w)
        assert np.all(out.values == 0.0)

    def test_preserves_index_set(self):
        rng = np.random.default_rng(2)
        w = ConvLayerWeights(rng.standard_normal((3, 3, 2, 5)), rng.standard_normal(5))
        out = conv_layer_forward(FeatureStack(rng.uniform(0, 1, (6, 9, 2))), w)
        assert (out.i1, out.i2, out.channels) == (6, 9, 5)

    def test_channel_mismatch_rejected(self):
        w = ConvLayerWeights(np.ones((2, 2, 3, 1)), np.zeros(1))
        with pytest.raises(ValueError, match="channel"):
            conv_layer_forward(stack(np.ones((4, 4))), w)


class TestConvBlock:
    def test_depth_one_equals_single_layer(self):
        rng = np.random.default_rng(3)
        w = ConvLayerWeights(rng.standard_normal((2, 2, 1, 3)), rng.standard_normal(3))
        x = stack(rng.uniform(0, 1, (5, 5)))
        assert np.array_equal(conv_block_forward(x, ConvBlock([w])).values,
                              conv_layer_forward(x, w).values)

    def test_unit_tap_second_layer_propagates(self):
        rng = np.random.default_rng(4)
        w1 = ConvLayerWeights(np.abs(rng.standard_normal((2, 2, 1, 2))), np.zeros(2))
        # second layer: unit tap at (1,1) on the same channel, zero bias
        prop = np.zeros((2, 2, 2, 2))
        prop[0, 0, 0, 0] = prop[0, 0, 1, 1] = 1.0
        w2 = ConvLayerWeights(prop, np.zeros(2))
        x = stack(rng.uniform(0, 1, (6, 6)))
        one = conv_block_forward(x, ConvBlock([w1]))
        two = conv_block_forward(x, ConvBlock([w1, w2]))
        assert np.allclose(one.values, two.values)

    def test_output_nonnegative(self):
        rng = np.random.default_rng(5)
        block = ConvBlock([ConvLayerWeights(rng.standard_normal((2, 2, 1, 3)), rng.standard_normal(3)),
                           ConvLayerWeights(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(3))])
        out = conv_block_forward(stack(rng.uniform(0, 1, (7, 7))), block)
        assert np.all(out.values >= 0.0)

    def test_shape_chain_enforced(self):
        w1 = ConvLayerWeights(np.ones((2, 2, 1, 3)), np.zeros(3))
        w2 = ConvLayerWeights(np.ones((2, 2, 2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            ConvBlock([w1, w2])


class TestPooling:
    def test_size_one_is_identity(self):
        rng = np.random.default_rng(6)
        x = FeatureStack(rng.standard_normal((5, 6, 2)))
        assert np.array_equal(local_max_pool(x, 1).values, x.values)
        assert np.array_equal(subsample(x, 1).values, x.values)

    def test_rank_grid_window_maxima(self):
        x = stack(np.arange(1, 17, dtype=float).reshape(4, 4))
        assert np.array_equal(local_max_pool(x, 2).values[:, :, 0], [[6, 8], [14, 16]])

    def test_clipped_window_is_corner_value(self):
        x = stack(np.arange(9, dtype=float).reshape(3, 3))
        out = local_max_pool(x, 2)
        assert out.values.shape[:2] == (2, 2)
        assert out.values[1, 1, 0] == x.values[2, 2, 0]

    def test_subsample_keeps_top_left(self):
        x = stack(np.arange(1, 17, dtype=float).reshape(4, 4))
        assert np.array_equal(subsample(x, 2).values[:, :, 0], [[1, 3], [9, 11]])

    def test_subsample_larger_than_grid(self):
        x = stack(np.arange(1, 10, dtype=float).reshape(3, 3))
        out = subsample(x, 5)
        assert out.values.shape == (1, 1, 1)
        assert out.values[0, 0, 0] == 1.0

    def test_subsample_below_pool_and_membership(self):
        rng = np.random.default_rng(7)
        x = FeatureStack(rng.uniform(0, 1, (7, 9, 3)))
        for s in (2, 3, 4):
            mx = local_max_pool(x, s).values
            sb = subsample(x, s).values
            assert np.all(sb <= mx + 1e-15)
            # the pooled max is attained by a window member
            for (i, j, c) in [(0, 0, 0), (mx.shape[0] - 1, mx.shape[1] - 1, 2)]:
                window = x.values[i * s:(i + 1) * s, j * s:(j + 1) * s, c]
                assert mx[i, j, c] == window.max()

    def test_subsample_composition(self):
        rng = np.random.default_rng(8)
        x = FeatureStack(rng.standard_normal((13, 11, 2)))
        for a, b in ((2, 2), (2, 3), (3, 2)):
            lhs = subsample(subsample(x, a), b).values
            rhs = subsample(x, a * b).values
            assert np.array_equal(lhs, rhs)


class TestOutputLayer:
    def test_full_window_single_channel_is_global_max(self):
        rng = np.random.default_rng(9)
        x = FeatureStack(rng.standard_normal((5, 7, 1)))
        assert output_layer(x, [1.0], (5, 7)) == pytest.approx(x.values.max())

    def test_zero_weights_give_zero(self):
        rng = np.random.default_rng(10)
        x = FeatureStack(rng.standard_normal((4, 4, 3)))
        assert output_layer(x, np.zeros(3), (4, 4)) == 0.0

    def test_unit_window_difference(self):
        x = FeatureStack(np.stack([np.full((3, 3), 0.8), np.full((3, 3), 0.3)], axis=2))
        assert output_layer(x, [1.0, -1.0], (1, 1)) == pytest.approx(0.5)

    def test_window_out_of_range_rejected(self):
        x = FeatureStack(np.zeros((3, 3, 1)))
        with pytest.raises(ValueError):
            output_layer(x, [1.0], (4, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 6))
def test_pool_shape_law(i1, i2, s):
    x = FeatureStack(np.random.default_rng(i1 * 31 + i2).standard_normal((i1, i2, 2)))
    want = (-(-i1 // s), -(-i2 // s))
    assert local_max_pool(x, s).values.shape[:2] == want
    assert subsample(x, s).values.shape[:2] == want


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(1, 4))
def test_conv_shape_law(i1, i2, m, k):
    rng = np.random.default_rng(1000 + i1 + 31 * i2)
    w = ConvLayerWeights(rng.standard_normal((m, m, 2, k)), rng.standard_normal(k))
    out = conv_layer_forward(FeatureStack(rng.uniform(0, 1, (i1, i2, 2))), w)
    assert out.values.shape == (i1, i2, k)
    assert np.all(out.values >= 0.0)
