import math

import numpy as np
import pytest

from hmpcnn import layers, networks
from hmpcnn.model import SpecError
from hmpcnn.networks import (ArchSpec, Network, forward, forward_many, load_network,
                             param_count, random_network, rate_curve, save_network,
                             table1_params, theorem1_params, vc_bound_shape)


class TestArchSpec:
    def test_output_window_validated_at_construction(self):
        with pytest.raises(SpecError):
            ArchSpec("F1", (2, 2), (2, 2), 1, (2,), (5, 5), (7, 7))  # final grid is 4x4

    def test_f4_requires_unit_subsampling(self):
        with pytest.raises(SpecError):
            ArchSpec("F4", (2,), (2,), 1, 3, (2, 2), (7, 7))

    def test_final_grid_iterated_ceilings(self):
        arch = ArchSpec("F1", (1, 1, 1), (2, 2, 2), 1, (2, 2), (2, 2), (13, 9))
        assert arch.final_grid() == (4, 3)  # ceil(ceil(13/2)/2), ceil(ceil(9/2)/2)

    def test_validated_arch_never_fails_forward(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            l = int(rng.integers(1, 4))
            pools = tuple(int(rng.choice([1, 2, 4])) for _ in range(l - 1))
            d = int(rng.integers(8, 20))
            grid = (d, d)
            for s in pools:
                grid = (-(-grid[0] // s), -(-grid[1] // s))
            dt = (int(rng.integers(1, grid[0] + 1)), int(rng.integers(1, grid[1] + 1)))
            arch = ArchSpec("F1", tuple([2] * l), tuple([2] * l), 1, pools, dt, (d, d))
            net = random_network(arch, rng)
            forward(net, rng.uniform(0, 1, (d, d)))  # must not raise


class TestForward:
    def test_classes_coincide_for_one_block(self):
        rng = np.random.default_rng(1)
        a1 = ArchSpec("F1", (3,), (2,), 2, (), (4, 4), (6, 6))
        a2 = ArchSpec("F2", (3,), (2,), 2, (), (4, 4), (6, 6))
        a3 = ArchSpec("F3", (3,), (2,), 2, 1, (4, 4), (6, 6))
        net1 = random_network(a1, rng)
        net2 = Network(a2, net1.blocks, net1.out_weights)
        net3 = Network(a3, net1.blocks, net1.out_weights)
        for _ in range(5):
            x = rng.uniform(0, 1, (6, 6))
            v = forward(net1, x)
            assert forward(net2, x) == v
            assert forward(net3, x) == v

    def test_zero_weights_give_zero(self):
        arch = ArchSpec("F1", (2, 2), (2, 2), 1, (2,), (2, 2), (7, 7))
        net = random_network(arch, np.random.default_rng(2))
        for arr in net.weight_arrays():
            arr[...] = 0.0
        assert forward(net, np.random.default_rng(3).uniform(0, 1, (7, 7))) == 0.0

    def test_matches_layerwise_composition(self):
        rng = np.random.default_rng(4)
        arch = ArchSpec("F1", (1, 1), (2, 2), 1, (2,), (1, 1), (7, 7))
        net = random_network(arch, rng)
        x = rng.uniform(0, 1, (7, 7))
        st = layers.FeatureStack.from_image(x)
        st = layers.conv_block_forward(st, net.blocks[0])
        st = layers.local_max_pool(st, 2)
        st = layers.conv_block_forward(st, net.blocks[1])
        want = layers.output_layer(st, net.out_weights, (1, 1))
        assert forward(net, x) == pytest.approx(want, abs=1e-15)

    def test_wrong_image_size_rejected(self):
        arch = ArchSpec("F4", (1,), (2,), 1, 1, (3, 3), (5, 5))
        with pytest.raises(SpecError):
            forward(random_network(arch, np.random.default_rng(0)), np.zeros((6, 6)))


class TestParamCount:
    def test_direct_count(self):
        assert param_count(ArchSpec("F1", (3,), (2,), 1, (), (1, 1), (4, 4))) == 18

    def test_minimal(self):
        assert param_count(ArchSpec("F1", (1,), (1,), 1, (), (1, 1), (2, 2))) == 3

    def test_depth_scaling_formula(self):
        a1 = ArchSpec("F3", (4, 4), (3, 3), 1, 2, (2, 2), (9, 9))
        a2 = ArchSpec("F3", (4, 4), (3, 3), 2, 2, (2, 2), (9, 9))
        # exact formula: z layers contribute per block M^2 k'_i k + k
        w1, w2 = param_count(a1), param_count(a2)
        assert w2 - w1 == 2 * (3 * 3 * 4 * 4 + 4)

    def test_matches_actual_tensors(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            l = int(rng.integers(1, 4))
            arch = ArchSpec("F2", tuple(int(rng.integers(1, 5)) for _ in range(l)),
                            tuple(int(rng.integers(1, 4)) for _ in range(l)),
                            int(rng.integers(1, 4)),
                            tuple(1 for _ in range(l - 1)), (2, 2), (9, 9))
            net = random_network(arch, rng)
            total = sum(arr.size for arr in net.weight_arrays())
            assert total == param_count(arch)


class TestTheorem1Params:
    def test_depth_from_feature_budget(self):
        t1, _, _ = theorem1_params(3, (2, 3), (1, 1), 5, 8, 31, 31)
        assert t1.layers_per_block == 3 * 6  # max(b) * (L_n + 1)

    def test_output_window_exact_division(self):
        t1, t2, t3 = theorem1_params(3, (2, 2), (2, 2), 5, 8, 31, 31)
        assert t1.out_bounds == (6, 6)
        assert t2.out_bounds == (6, 6) and t3.out_bounds == (6, 6)

    def test_filter_size_vectors(self):
        t1, t2, t3 = theorem1_params(3, (2, 2), (2, 2), 5, 8, 31, 31)
        assert t1.filter_sizes == (2, 2, 2)
        assert t2.filter_sizes == (2, 2, 2)
        assert t3.filter_sizes == (2, 3, 5)

    def test_widened_channel_and_depth_relations(self):
        t1, t2, t3 = theorem1_params(3, (2, 2), (2, 2), 5, 8, 31, 31)
        assert t2.channels == tuple(2 * k + 4 for k in t1.channels)
        assert t2.layers_per_block == t1.layers_per_block + 3 * max(t1.channels)
        assert t3.pool == 4 and t2.pool == (2, 2)

    def test_no_pooling_keeps_depth(self):
        t1, t2, _ = theorem1_params(2, (2,), (1,), 3, 4, 11, 11)
        assert t2.layers_per_block == t1.layers_per_block  # log2(1) = 0

    def test_bad_dimension_form_rejected(self):
        with pytest.raises(SpecError):
            theorem1_params(3, (2, 2), (2, 2), 5, 8, 30, 31)


class TestTable1Params:
    def test_row4(self):
        arch = table1_params(4, 3, (1, 1), 4, 2, 31, 31)
        assert arch.variant == "F4"
        assert arch.out_bounds == (24, 24)
        assert arch.pool == 1
        assert arch.filter_sizes == (2, 3, 5)

    def test_row3(self):
        arch = table1_params(3, 3, (2, 2), 4, 2, 31, 31)
        assert arch.variant == "F3"
        assert arch.pool == 4
        assert arch.out_bounds == (6, 6)
        assert arch.filter_sizes == (2, 3, 5)

    def test_rows_1_2_share_formulas(self):
        a1 = table1_params(1, 3, (1, 1), 2, 1, 31, 31)
        a2 = table1_params(2, 3, (1, 1), 2, 1, 31, 31)
        assert a1.filter_sizes == a2.filter_sizes == (2, 3, 5)
        assert a1.out_bounds == a2.out_bounds
        assert (a1.variant, a2.variant) == ("F1", "F2")

    def test_ceiling_output_bounds(self):
        arch = table1_params(1, 3, (2, 1), 2, 1, 31, 31)
        assert arch.out_bounds == (12, 12)  # ceil(24/2)

    def test_grid_constraint_violation(self):
        with pytest.raises(SpecError):
            table1_params(1, 3, (4, 1), 2, 1, 31, 31)


class TestBounds:
    def test_vc_shape_base(self):
        assert vc_bound_shape(1, 1, 2) == pytest.approx(1.0)

    def test_vc_shape_value(self):
        assert vc_bound_shape(4, 31, 31) == pytest.approx(16 * math.log2(4 * 961))

    def test_vc_shape_monotone(self):
        assert vc_bound_shape(5, 31, 31) > vc_bound_shape(4, 31, 31) > vc_bound_shape(4, 17, 17)

    def test_rate_curve_values(self):
        assert rate_curve(256, 2.0) == pytest.approx(0.25)
        assert rate_curve(1, 5.0) == 1.0

    def test_rate_curve_limit_exponent(self):
        # exponent tends to -1/2: for huge p the curve approaches n^(-1/2)
        assert rate_curve(10**6, 1e9) == pytest.approx(10**-3, rel=1e-3)

    def test_rate_curve_domain(self):
        with pytest.raises(ValueError):
            rate_curve(100, 0.5)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        arch = ArchSpec("F2", (2, 3), (2, 3), 2, (2,), (3, 3), (9, 9))
        net = random_network(arch, rng)
        path = tmp_path / "weights.npz"
        save_network(path, net)
        loaded = load_network(path)
        assert loaded.arch == arch
        for a, b in zip(net.weight_arrays(), loaded.weight_arrays()):
            assert np.array_equal(a, b)
        x = rng.uniform(0, 1, (9, 9))
        assert forward(net, x) == forward(loaded, x)


def test_forward_many_chunking_bitwise_stable():
    rng = np.random.default_rng(7)
    arch = ArchSpec("F1", (2, 2), (2, 2), 1, (2,), (2, 2), (7, 7))
    net = random_network(arch, rng)
    images = rng.uniform(0, 1, (30, 7, 7))
    assert np.array_equal(forward_many(net, images, chunk=7),
                          forward_many(net, images, chunk=1000))
