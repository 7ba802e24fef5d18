"""Reflection group: kernel derivation, lifting/group convs, Group Pool."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from equikernel.core import ConvSpec, GradTape, ShapeError, conv2d
from equikernel.reflect import (BasicBlock, PairedBatchNorm, PlainConv, ReflectConv, group_conv, group_pool,
                                lift_conv, mirror, reflect_kernel, swap_groups)
from oracles import conv2d_loops, mirror_w


def swap_mirror(f):
    return swap_groups(mirror_w(f), axis=-3)


class TestReflectKernel:
    def test_width_symmetric_fixed_point(self):
        w = np.array([[1.0, 2.0, 1.0], [0.0, 5.0, 0.0], [3.0, 3.0, 3.0]])[None, None]
        np.testing.assert_array_equal(reflect_kernel(w, grouped_input=False).data, w)

    def test_row_kernel(self):
        w = np.array([-1.0, 0.0, 1.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(reflect_kernel(w, False).data.ravel(), [1.0, 0.0, -1.0])

    def test_grouped_swaps_and_flips(self):
        w = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        out = reflect_kernel(w, grouped_input=True).data
        np.testing.assert_array_equal(out[0, 0], w[0, 1, :, ::-1])
        np.testing.assert_array_equal(out[0, 1], w[0, 0, :, ::-1])

    def test_odd_channels_grouped(self):
        with pytest.raises(ShapeError):
            reflect_kernel(np.zeros((1, 3, 3, 3)), grouped_input=True)

    def test_even_kernel(self):
        with pytest.raises(ShapeError):
            reflect_kernel(np.zeros((1, 1, 2, 2)), grouped_input=False)

    @given(st.integers(0, 10_000))
    def test_involution(self, seed):
        w = np.random.default_rng(seed).normal(size=(2, 4, 3, 3))
        twice = reflect_kernel(reflect_kernel(w, True), True).data
        np.testing.assert_array_equal(twice, w)


class TestLiftConv:
    def test_channel_doubling(self):
        conv = ReflectConv(1, 32, ConvSpec.same(3), grouped=False)
        assert lift_conv(np.zeros((2, 1, 64, 44), np.float32), conv).shape == (2, 64, 64, 44)

    def test_constant_input_groups_equal(self):
        conv = ReflectConv(1, 4, ConvSpec(3), grouped=False, rng=np.random.default_rng(1))
        out = conv(np.full((1, 1, 6, 5), 0.7, np.float32)).data
        np.testing.assert_allclose(out[:, :4], out[:, 4:], rtol=1e-6)

    def test_brute_force_oracle_5x5(self):
        rng = np.random.default_rng(2)
        conv = ReflectConv(1, 3, ConvSpec.same(3), grouped=False, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 1, 5, 5))
        w = conv.weight.data
        # build the lifted map directly from the definition
        def lifted(img):
            return np.concatenate([conv2d_loops(img, w, pad=1), conv2d_loops(img, w[..., ::-1], pad=1)], axis=1)

        np.testing.assert_allclose(conv(x).data, lifted(x), atol=1e-12)
        np.testing.assert_allclose(lifted(mirror_w(x)), swap_mirror(lifted(x)), atol=1e-12)
        np.testing.assert_allclose(conv(mirror_w(x)).data, swap_mirror(conv(x).data), atol=1e-12)

    def test_rejects_grouped_bank(self):
        with pytest.raises(ValueError):
            lift_conv(np.zeros((1, 4, 3, 3)), ReflectConv(2, 2, ConvSpec(1), grouped=True))


class TestGroupConv:
    @given(st.integers(0, 10_000))
    def test_equivariance_2x2_channels_6x6(self, seed):
        rng = np.random.default_rng(seed)
        conv = ReflectConv(2, 2, ConvSpec.same(3), grouped=True, rng=rng, dtype=np.float64)
        f = rng.normal(size=(1, 4, 6, 6))
        np.testing.assert_allclose(group_conv(swap_mirror(f), conv).data, swap_mirror(group_conv(f, conv).data),
                                   atol=1e-5)

    def test_matches_loop_definition(self):
        rng = np.random.default_rng(3)
        conv = ReflectConv(2, 2, ConvSpec.same(3), grouped=True, rng=rng, dtype=np.float64)
        f = rng.normal(size=(1, 4, 6, 6))
        w = conv.weight.data
        w_ref = np.concatenate([w[:, 2:], w[:, :2]], axis=1)[..., ::-1]
        expect = np.concatenate([conv2d_loops(f, w, pad=1), conv2d_loops(f, w_ref, pad=1)], axis=1)
        np.testing.assert_allclose(group_conv(f, conv).data, expect, atol=1e-12)

    def test_stage4_shape(self):
        conv = ReflectConv(256, 256, ConvSpec.same(3), grouped=True)
        assert group_conv(np.zeros((1, 512, 16, 11), np.float32), conv).shape == (1, 512, 16, 11)

    def test_zero_in_zero_out(self):
        conv = ReflectConv(2, 3, ConvSpec.same(3), grouped=True, rng=np.random.default_rng(4))
        assert not np.any(group_conv(np.zeros((1, 4, 5, 5), np.float32), conv).data)

    def test_without_swap_breaks_after_first_layer(self):
        rng = np.random.default_rng(5)
        conv = ReflectConv(2, 2, ConvSpec.same(3), grouped=True, rng=rng, dtype=np.float64)
        conv.swap = False
        f = rng.normal(size=(1, 4, 6, 6))
        err = np.abs(conv(swap_mirror(f)).data - swap_mirror(conv(f).data)).max()
        assert err > 1e-2

    @pytest.mark.parametrize("grouped", [False, True])
    def test_strided_even_width_exact(self, grouped):
        rng = np.random.default_rng(6)
        c_in = 4 if grouped else 1
        conv = ReflectConv(c_in // (2 if grouped else 1), 3, ConvSpec(3, 2, 1), grouped=grouped, rng=rng,
                           dtype=np.float64)
        x = rng.normal(size=(1, c_in, 8, 6))
        xt = swap_mirror(x) if grouped else mirror_w(x)
        np.testing.assert_allclose(conv(xt).data, swap_mirror(conv(x).data), atol=1e-12)

    def test_grouped_depthwise_lift_equivariant(self):
        rng = np.random.default_rng(7)
        conv = ReflectConv(4, 4, ConvSpec.same(3), grouped=False, groups=4, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 4, 5, 6))
        np.testing.assert_allclose(conv(mirror_w(x)).data, swap_mirror(conv(x).data), atol=1e-12)


class TestGroupPool:
    def test_pairwise_max(self):
        a = np.array([1.0, -2.0, 3.0]).reshape(3, 1, 1)
        b = np.array([0.0, 5.0, 3.0]).reshape(3, 1, 1)
        np.testing.assert_array_equal(group_pool(np.concatenate([a, b])).data.ravel(), [1.0, 5.0, 3.0])

    def test_channel_halving(self):
        assert group_pool(np.zeros((2, 512, 16, 11))).shape == (2, 256, 16, 11)

    @given(st.integers(0, 10_000))
    def test_swap_invariant(self, seed):
        f = np.random.default_rng(seed).normal(size=(6, 3, 3))
        np.testing.assert_array_equal(group_pool(swap_groups(f)).data, group_pool(f).data)

    def test_mean_mode(self):
        f = np.arange(4.0).reshape(4, 1, 1)
        np.testing.assert_array_equal(group_pool(f, "mean").data.ravel(), [1.0, 2.0])

    def test_odd_channels(self):
        with pytest.raises(ShapeError):
            group_pool(np.zeros((3, 2, 2)))


class TestStackProperties:
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_deep_stack_equivariance_float32(self, seed, depth):
        rng = np.random.default_rng(seed)
        layers = [ReflectConv(1, 3, ConvSpec.same(3), grouped=False, rng=rng)]
        layers += [ReflectConv(3, 3, ConvSpec.same(3), grouped=True, rng=rng) for _ in range(depth)]
        x = rng.random((1, 1, 10, 8), dtype=np.float32)

        def run(inp):
            h = inp
            for layer in layers:
                h = layer(h).data
            return h

        fx, fm = run(x), run(mirror_w(x))
        assert np.abs(fm - swap_mirror(fx)).max() <= 1e-4
        assert np.abs(group_pool(fm).data - mirror_w(group_pool(fx).data)).max() <= 1e-4

    def test_parameter_halving(self):
        refl = ReflectConv(16, 32, ConvSpec.same(3), grouped=True)
        plain = PlainConv(32, 32, ConvSpec.same(3))
        assert refl.num_parameters() == plain.num_parameters() == 32 * 32 * 9
        lift = ReflectConv(1, 32, ConvSpec.same(3), grouped=False)
        assert lift.num_parameters() == PlainConv(1, 32, ConvSpec.same(3)).num_parameters()

    def test_block_train_mode_equivariance(self):
        rng = np.random.default_rng(8)
        block = BasicBlock(2, 3, 2, reflect=True, rng=rng, dtype=np.float64)
        f = rng.normal(size=(2, 4, 8, 6))
        # batch statistics are shared across the mirrored copy when both go in together
        both = block(np.concatenate([f, swap_mirror(f)])).data
        np.testing.assert_allclose(both[2:], swap_mirror(both[:2]), atol=1e-10)

    def test_paired_bn_shares_statistics(self):
        bn = PairedBatchNorm(2, dtype=np.float64)
        assert bn.num_parameters() == 4
        f = np.random.default_rng(9).normal(size=(3, 4, 2, 2))
        np.testing.assert_allclose(bn(swap_groups(f)).data, swap_groups(bn(f).data), atol=1e-12)

    def test_gradient_flows_to_shared_bank(self):
        conv = ReflectConv(1, 2, ConvSpec.same(3), grouped=False, dtype=np.float64)
        x = np.random.default_rng(10).normal(size=(1, 1, 4, 4))
        with GradTape() as tape:
            loss = (conv(x) ** 2).sum()
        tape.backward(loss, conv.parameters())
        assert conv.weight.grad.shape == conv.weight.shape and np.any(conv.weight.grad)

    def test_mirror_tensor_keeps_labels(self):
        from equikernel.core import Tensor
        t = Tensor(np.arange(6.0).reshape(1, 2, 3), "CHW")
        m = mirror(t)
        assert m.axes == "CHW"
        np.testing.assert_array_equal(m.data, t.data[..., ::-1])
