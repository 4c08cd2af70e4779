import math

import numpy as np
import pytest

from hmpcnn import layers, model, networks, transforms
from hmpcnn.layers import ConvBlock, ConvLayerWeights, FeatureStack
from hmpcnn.model import SpecError
from hmpcnn.transforms import (FeedforwardNet, build_gmax, commute_subsample,
                               convert_f1_to_f2, convert_f2_to_f3, embed_feedforward,
                               maxpool_to_conv_sub, represent_hmp)

from helpers import random_ffnet_spec


class TestGmax:
    def test_known_quadruple(self):
        assert build_gmax()(0.2, 0.7, 0.1, 0.5) == pytest.approx(0.7)

    def test_all_zero(self):
        assert build_gmax()(0.0, 0.0, 0.0, 0.0) == 0.0

    def test_idempotent_on_constants(self):
        g = build_gmax()
        for c in (0.0, 0.3, 1.7):
            assert g(c, c, c, c) == pytest.approx(c)

    def test_equals_max_on_nonnegative_samples(self):
        rng = np.random.default_rng(0)
        g = build_gmax()
        u = rng.uniform(0, 3, size=(4, 500))
        assert np.allclose(g(u[0], u[1], u[2], u[3]), u.max(axis=0))

    def test_shape_is_two_hidden_layers_width_four(self):
        g = build_gmax()
        assert g.depth == 2 and g.width == 4


class TestEmbedFeedforward:
    def test_identity_net_copies_shifted_channel(self):
        # g(u) = u1 realised as a one-hidden-layer net; embedding copies the
        # tap channel for nonnegative inputs
        g = FeedforwardNet([np.array([[1.0, 0, 0, 0]])], [np.zeros(1)], np.array([1.0]))
        rng = np.random.default_rng(1)
        stack = rng.uniform(0, 1, (6, 6, 3))
        block = embed_feedforward(g, 2, (1, 1, 1, 1, 2), 1, (6, 6), 3)
        out = layers.block_forward_batch(stack[None], block)[0]
        assert np.allclose(out[:, :, 1], stack[:, :, 0])
        assert np.allclose(out[:, :, 0], stack[:, :, 0])  # preserved channel

    def test_gmax_on_constant_stack(self):
        # strided 4-tap max of a constant c is c away from the last delta
        # rows/cols, where zero padding bleeds in but max(c, 0) = c
        c = 0.6
        delta = 2
        stack = np.full((7, 7, 6), c)
        block = embed_feedforward(build_gmax(), 2, (1, 1, 1, 1, 2), delta, (7, 7), 6)
        out = layers.block_forward_batch(stack[None], block)[0]
        assert np.allclose(out[:, :, 1], c)

    def test_random_stacks_match_direct_evaluation(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            t = int(rng.integers(1, 5))
            width, depth = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            delta = int(rng.integers(1, 4))
            g = transforms.random_ffnet(rng, depth, width, scale=1.5)
            taps = tuple(int(rng.integers(1, t + 1)) for _ in range(5))
            i1, i2 = int(rng.integers(3, 8)), int(rng.integers(3, 8))
            stack = rng.uniform(0, 1, (i1, i2, t + width))
            block = embed_feedforward(g, t, taps, delta, (i1, i2), t + width)
            out = layers.block_forward_batch(stack[None], block)[0]
            padded = np.zeros((i1 + delta, i2 + delta, t))
            padded[:i1, :i2] = stack[:, :, :t]
            s1, s2, s3, s4, s5 = taps
            want = np.maximum(g(padded[:i1, :i2, s1 - 1],
                                padded[delta:, :i2, s2 - 1][:i1],
                                padded[:i1, delta:][:, :i2, s3 - 1],
                                padded[delta:, delta:][:i1, :i2, s4 - 1]), 0.0)
            worst = max(worst, float(np.abs(out[:, :, s5 - 1] - want).max()))
        assert worst <= 1e-9

    def test_block_shape(self):
        g = transforms.random_ffnet(np.random.default_rng(3), 2, 3)
        block = embed_feedforward(g, 4, (1, 2, 3, 4, 2), 2, (5, 5), 7)
        assert block.depth == 3  # depth + 1
        assert block.filter_size == 3  # delta + 1
        assert block.in_channels == block.out_channels == 7

    def test_channel_budget_enforced(self):
        g = transforms.random_ffnet(np.random.default_rng(4), 1, 3)
        with pytest.raises(ValueError):
            embed_feedforward(g, 4, (1, 1, 1, 1, 2), 1, (5, 5), 9)


class TestMaxpoolRewrite:
    def test_size_one_pool_is_empty_rewrite(self):
        block = maxpool_to_conv_sub(2, 0, 3, (6, 6))
        assert block.depth == 0
        rng = np.random.default_rng(5)
        stack = rng.uniform(0, 1, (6, 6, 8))
        out = layers.block_forward_batch(stack[None], block)[0]
        # subsampling by 1 after the identity equals max-pooling by 1
        assert np.array_equal(out, stack)

    @pytest.mark.parametrize("k,n,size", [(1, 1, 6), (1, 2, 8), (2, 2, 8)])
    def test_rewrite_matches_pooling(self, k, n, size):
        rng = np.random.default_rng(10 * k + n)
        m = 2 ** (n - 1) + 1
        block = maxpool_to_conv_sub(k, n, m, (size, size))
        assert block.depth == 3 * n * k
        for _ in range(25):
            stack = rng.uniform(0, 1, (size, size, 2 * k + 4))
            got = layers.subsample(
                FeatureStack(layers.block_forward_batch(stack[None], block)[0]), 2**n)
            want = layers.local_max_pool(FeatureStack(stack), 2**n)
            assert np.abs(got.values[:, :, :k] - want.values[:, :, :k]).max() <= 1e-12

    def test_intermediate_stacks_stay_nonnegative(self):
        rng = np.random.default_rng(6)
        block = maxpool_to_conv_sub(2, 2, 3, (8, 8))
        x = rng.uniform(0, 1, (1, 8, 8, 8))
        for lay in block.layers:
            x, _ = layers.conv_forward_batch(x, lay.filter, lay.bias)
            assert np.all(x >= 0.0)

    def test_filter_too_small_rejected(self):
        with pytest.raises(ValueError):
            maxpool_to_conv_sub(1, 2, 2, (8, 8))  # needs M >= 3


class TestCommuteSubsample:
    def test_dilation_by_one_is_identity(self):
        rng = np.random.default_rng(7)
        block = ConvBlock([ConvLayerWeights(rng.standard_normal((2, 2, 1, 2)),
                                            rng.standard_normal(2))])
        same = commute_subsample(block, 1)
        assert same.filter_size == 2
        assert np.array_equal(same.layers[0].filter, block.layers[0].filter)

    def test_tap_positions(self):
        rng = np.random.default_rng(8)
        block = ConvBlock([ConvLayerWeights(rng.standard_normal((2, 2, 1, 1)),
                                            rng.standard_normal(1))])
        dilated = commute_subsample(block, 2)
        filt = dilated.layers[0].filter
        assert filt.shape[0] == 3
        taps = {(i, j) for i in range(3) for j in range(3) if filt[i, j, 0, 0] != 0}
        assert taps <= {(0, 0), (0, 2), (2, 0), (2, 2)}
        assert np.array_equal(filt[::2, ::2], block.layers[0].filter)

    def test_commutation_identity(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            m = int(rng.integers(1, 4))
            z = int(rng.integers(1, 3))
            n = 2 ** int(rng.integers(1, 3))
            k_in, k_out = int(rng.integers(1, 3)), int(rng.integers(1, 4))
            block_layers = []
            for t in range(z):
                ki = k_in if t == 0 else k_out
                block_layers.append(ConvLayerWeights(rng.standard_normal((m, m, ki, k_out)),
                                                     rng.standard_normal(k_out)))
            block = ConvBlock(block_layers)
            stack = rng.standard_normal((int(rng.integers(4, 12)), int(rng.integers(4, 12)), k_in))
            dilated = commute_subsample(block, n)
            assert dilated.filter_size == (m - 1) * n + 1
            lhs = layers.subsample(
                FeatureStack(layers.block_forward_batch(stack[None], dilated)[0]), n)
            rhs = layers.block_forward_batch(
                layers.subsample(FeatureStack(stack), n).values[None], block)[0]
            assert np.abs(lhs.values - rhs).max() <= 1e-12


def random_f1_net(rng, d=31, levels=(2, 3)):
    from hmpcnn.training import admissible_pool_vectors
    l = int(rng.choice(levels))
    vecs = admissible_pool_vectors(l)
    n = vecs[int(rng.integers(0, len(vecs)))]
    k = int(rng.integers(1, 4))
    z = int(rng.integers(1, 3))
    arch = networks.table1_params(1, l, n, k, z, d, d)
    return networks.random_network(arch, rng)


class TestClassConversions:
    def test_unit_pools_degenerate(self):
        rng = np.random.default_rng(11)
        arch = networks.ArchSpec("F1", (2, 2), (2, 3), 1, (1,), (4, 4), (9, 9))
        net = networks.random_network(arch, rng)
        net2 = convert_f1_to_f2(net)
        assert net2.arch.layers_per_block == arch.layers_per_block  # no depth growth
        images = rng.uniform(0, 1, (10, 9, 9))
        assert np.allclose(networks.forward_many(net, images),
                           networks.forward_many(net2, images), atol=1e-12)

    def test_f1_to_f2_small(self):
        rng = np.random.default_rng(12)
        arch = networks.ArchSpec("F1", (2, 2), (2, 2), 1, (2,), (3, 3), (7, 7))
        net = networks.random_network(arch, rng)
        net2 = convert_f1_to_f2(net)
        images = rng.uniform(0, 1, (20, 7, 7))
        assert np.abs(networks.forward_many(net, images)
                      - networks.forward_many(net2, images)).max() <= 1e-9
        assert net2.arch.variant == "F2"
        assert net2.arch.channels == (8, 8)

    def test_single_block_f2_to_f3_unchanged(self):
        rng = np.random.default_rng(13)
        arch = networks.ArchSpec("F2", (3,), (2,), 2, (), (4, 4), (6, 6))
        net = networks.random_network(arch, rng)
        net3 = convert_f2_to_f3(net)
        assert net3.arch.pool == 1
        assert net3.arch.filter_sizes == arch.filter_sizes
        images = rng.uniform(0, 1, (10, 6, 6))
        assert np.allclose(networks.forward_many(net, images),
                           networks.forward_many(net3, images), atol=1e-12)

    def test_filter_recursion_reaches_plain_sizes(self):
        # converting the widened pooled-geometry class yields filters 2^(r-1)+1
        t1, t2, t3 = networks.theorem1_params(3, (1, 1), (2, 2), 1, 2, 31, 31)
        rng = np.random.default_rng(14)
        net2 = networks.random_network(t2, rng)
        net3 = convert_f2_to_f3(net2)
        assert net3.arch.filter_sizes == t3.filter_sizes == (2, 3, 5)
        assert net3.arch.pool == t3.pool == 4

    def test_f2_to_f3_random(self):
        rng = np.random.default_rng(15)
        arch = networks.ArchSpec("F2", (2, 2, 2), (2, 2, 2), 1, (2, 2), (6, 6), (31, 31))
        net = networks.random_network(arch, rng)
        net3 = convert_f2_to_f3(net)
        images = rng.uniform(0, 1, (20, 31, 31))
        assert np.abs(networks.forward_many(net, images)
                      - networks.forward_many(net3, images)).max() <= 1e-9
        assert net3.arch.pool == 4

    def test_chain_preserves_outputs_and_sizes(self):
        rng = np.random.default_rng(16)
        for _ in range(6):
            net = random_f1_net(rng, d=15, levels=(2,))
            arch = net.arch
            images = rng.uniform(0, 1, (10, 15, 15))
            base = networks.forward_many(net, images)
            net2 = convert_f1_to_f2(net)
            net3 = convert_f2_to_f3(net2)
            assert np.abs(networks.forward_many(net3, images) - base).max() <= 1e-9
            exps = [int(math.log2(s)) for s in arch.pool_sizes]
            assert net2.arch.layers_per_block == arch.layers_per_block + \
                3 * max(arch.channels) * (max(exps) if exps else 0)
            prods = [math.prod(arch.pool_sizes[:r]) for r in range(arch.num_blocks)]
            assert net3.arch.filter_sizes == tuple((m - 1) * p + 1 for m, p
                                                   in zip(arch.filter_sizes, prods))

    def test_trained_predictions_preserved(self):
        # conversions keep every plug-in label of a trained network
        import warnings

        from hmpcnn import datagen, training
        ds = datagen.generate(40, seed=21)
        arch = networks.table1_params(1, 3, (2, 2), 2, 1, 31, 31)
        cfg = training.TrainConfig(epochs=3, seed=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            net = training.train(arch, ds, cfg)
        net3 = convert_f2_to_f3(convert_f1_to_f2(net))
        test = datagen.generate(50, seed=22)
        beta = 6.0
        labels1 = training.plugin_classify_many(net, beta, test.images.astype(np.float64))
        labels3 = training.plugin_classify_many(net3, beta, test.images.astype(np.float64))
        assert np.array_equal(labels1, labels3)

    def test_wrong_variant_rejected(self):
        rng = np.random.default_rng(17)
        arch = networks.ArchSpec("F2", (2,), (2,), 1, (), (4, 4), (6, 6))
        net = networks.random_network(arch, rng)
        with pytest.raises(SpecError):
            convert_f1_to_f2(net)


class TestRepresentHmp:
    def test_level_one_gmax_is_global_window_max(self):
        spec = model.HmpSpec(1, (), (), {(1, 1): (1, 1, 1, 1)}, {(1, 1): build_gmax()})
        net = represent_hmp(spec, 7, 7)
        rng = np.random.default_rng(18)
        for _ in range(5):
            x = rng.uniform(0, 1, (7, 7))
            assert networks.forward(net, x) == pytest.approx(float(x.max()), abs=1e-12)

    def test_matches_relaxed_model_small(self):
        rng = np.random.default_rng(19)
        spec = random_ffnet_spec(rng, 2, (2,), (1,))
        net = represent_hmp(spec, 7, 7)
        for _ in range(20):
            x = rng.uniform(0, 1, (7, 7))
            assert abs(networks.forward(net, x)
                       - model.eval_model(x, spec, mode="relaxed")) <= 1e-9

    def test_matches_relaxed_model_pooled(self):
        rng = np.random.default_rng(20)
        spec = random_ffnet_spec(rng, 3, (2, 2), (2, 2))
        net = represent_hmp(spec, 31, 31)
        images = rng.uniform(0, 1, (20, 31, 31))
        vals = networks.forward_many(net, images)
        for i in range(20):
            assert abs(float(vals[i])
                       - model.eval_model(images[i], spec, mode="relaxed")) <= 1e-9

    def test_parameters_follow_construction(self):
        rng = np.random.default_rng(21)
        spec = random_ffnet_spec(rng, 3, (2, 1), (2, 2), depth=2, width=4)
        net = represent_hmp(spec, 31, 31)
        b_max = 2
        assert net.arch.channels == tuple([2 * b_max + 4] * 3)
        assert net.arch.layers_per_block == b_max * 3  # b_max * (depth + 1)
        assert net.arch.filter_sizes == (2, 2, 2)  # delta_(r-1) + 1
        assert net.arch.pool == (2, 2)
        assert net.arch.out_bounds == model.dims(3, 31, 31, spec)

    def test_dimension_form_required(self):
        rng = np.random.default_rng(22)
        spec = random_ffnet_spec(rng, 2, (1,), (1,))
        with pytest.raises(SpecError):
            represent_hmp(spec, 8, 8)  # 8 != 4m - 1

    def test_mixed_net_shapes_rejected(self):
        rng = np.random.default_rng(23)
        spec = random_ffnet_spec(rng, 2, (2,), (1,), depth=1, width=3)
        spec.g_funcs[(2, 1)] = transforms.random_ffnet(rng, 2, 3)
        with pytest.raises(SpecError):
            represent_hmp(spec, 7, 7)
