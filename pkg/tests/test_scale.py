import numpy as np
import pytest
from hypothesis import given, strategies as st

from equikernel.core import ShapeError, bilinear_resize, check_module, no_tape
from equikernel.reflect import mirror
from equikernel.scale import (SEL, STAGE_CHANNELS, assemble_multiscale, cross_channel_reduce,
                              cross_scale_attention, gate_and_split)

FULL_TAP_SHAPES = [(32, 64, 44), (64, 32, 22), (128, 16, 11), (256, 16, 11)]


def random_taps(rng, widths=STAGE_CHANNELS, grid=(16, 11), lead=()):
    h, w = grid
    sizes = [(4 * h, 4 * w), (2 * h, 2 * w), (h, w), (h, w)]
    return [rng.random(lead + (c,) + s) for c, s in zip(widths, sizes)]


class TestAssemble:
    def test_full_shape(self):
        taps = [np.zeros(s, np.float32) for s in FULL_TAP_SHAPES]
        assert assemble_multiscale(taps).shape == (480, 16, 11)

    def test_constant_taps(self):
        taps = [np.full(s, float(i)) for i, s in enumerate(FULL_TAP_SHAPES)]
        out = assemble_multiscale(taps).data
        for i, (lo, hi) in enumerate([(0, 32), (32, 96), (96, 224), (224, 480)]):
            np.testing.assert_allclose(out[lo:hi], float(i), atol=1e-12)

    def test_mismatched_grid(self):
        taps = [np.zeros(s) for s in FULL_TAP_SHAPES]
        taps[3] = np.zeros((256, 8, 11))
        with pytest.raises(ShapeError):
            assemble_multiscale(taps)


class TestReduce:
    def test_channels_and_relu(self):
        sel = SEL(rng=np.random.default_rng(0))
        f = np.random.default_rng(1).normal(size=(480, 16, 11)).astype(np.float32)
        out = cross_channel_reduce(f, sel).data
        assert out.shape == (120, 16, 11)
        assert out.min() >= 0

    def test_matches_matmul_oracle_in_eval(self):
        rng = np.random.default_rng(2)
        sel = SEL((4, 4, 8, 8), r=4, rng=rng, dtype=np.float64).eval()
        f = rng.normal(size=(24, 5, 3))
        w = sel.reduce.data[:, :, 0, 0]
        expect = np.maximum(np.einsum("dc,chw->dhw", w, f) / np.sqrt(1 + 1e-5), 0)
        np.testing.assert_allclose(sel.reduce_channels(f).data, expect, atol=1e-12)

    def test_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            SEL((32, 64, 128, 256), r=7)


class TestCrossScaleAttention:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        sel = SEL((4, 4, 8, 8), r=4, rng=rng, dtype=np.float64)
        att = sel.attention_weights(rng.normal(size=(6, 16, 11))).data
        assert att.shape == (176, 176)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)

    def test_identical_values_pass_through(self):
        rng = np.random.default_rng(4)
        sel = SEL((4, 4, 8, 8), r=4, reflect=False, rng=rng, dtype=np.float64)
        sel.branches[1].weight.data[:] = 0.0
        sel.branches[1].bias.data[:] = rng.normal(size=6)
        f_c = rng.normal(size=(6, 5, 4))
        q, k, v = sel._qkv(f_c)
        np.testing.assert_allclose(v.data, np.broadcast_to(v.data[0], v.shape), atol=1e-12)
        out = cross_scale_attention(f_c, sel).data
        token = sel.ffn(v.data[:1]).data[0]
        np.testing.assert_allclose(out, np.broadcast_to(token[:, None, None], out.shape), atol=1e-12)

    def test_full_width_shape(self):
        sel = SEL(rng=np.random.default_rng(5))
        f_c = np.random.default_rng(6).random((120, 16, 11)).astype(np.float32)
        assert cross_scale_attention(f_c, sel).shape == (120, 16, 11)

    @pytest.mark.parametrize("mode", ["plain", "dilated"])
    def test_branch_modes(self, mode):
        sel = SEL((4, 4, 8, 8), r=4, branch_mode=mode, rng=np.random.default_rng(7))
        x = np.random.default_rng(8).random((6, 7, 5)).astype(np.float32)
        assert sel.branch(0, sel.reduce_channels(np.zeros((24, 7, 5), np.float32))).shape == (6, 7, 5)
        assert sel.cross_scale(x).shape == x.shape

    def test_unknown_branch_mode(self):
        with pytest.raises(ValueError):
            SEL(branch_mode="atrous")


class TestGateAndSplit:
    def test_zero_gate_conv_halves(self):
        rng = np.random.default_rng(9)
        sel = SEL((4, 4, 8, 8), r=4, rng=rng, dtype=np.float64).eval()
        for g in sel.gate_convs:
            g.data[:] = 0.0
        taps = random_taps(rng, (4, 4, 8, 8), grid=(5, 3))
        f_s = rng.normal(size=(6, 5, 3))
        parts = sel._expanded_parts(f_s)
        outs = gate_and_split(f_s, taps, sel)
        for out, part, tap in zip(outs, parts, taps):
            expect = 0.5 * part.data + bilinear_resize(tap, (5, 3)).data
            np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_split_sizes(self):
        rng = np.random.default_rng(10)
        sel = SEL(rng=rng)
        outs = sel.gate_and_split(rng.random((120, 16, 11)).astype(np.float32), random_taps(rng))
        assert [o.shape[0] for o in outs] == [32, 64, 128, 256]

    def test_zero_split_is_pure_residual(self):
        rng = np.random.default_rng(11)
        sel = SEL((4, 4, 8, 8), r=4, identity_init=True, rng=rng, dtype=np.float64).eval()
        taps = [rng.random((c, 5, 3)) for c in (4, 4, 8, 8)]
        outs = sel.gate_and_split(rng.normal(size=(6, 5, 3)), taps)
        for out, tap in zip(outs, taps):
            np.testing.assert_array_equal(out.data, tap)

    def test_channel_mismatch(self):
        sel = SEL((4, 4, 8, 8), r=4)
        taps = [np.zeros((c, 5, 3), np.float32) for c in (4, 4, 8, 4)]
        with pytest.raises(ShapeError):
            sel.gate_and_split(np.zeros((6, 5, 3), np.float32), taps)


class TestSELProperties:
    def test_shape_contract(self):
        rng = np.random.default_rng(12)
        sel = SEL(rng=rng)
        taps = random_taps(rng)
        outs = sel(taps)
        assert [o.shape for o in outs] == [(32, 16, 11), (64, 16, 11), (128, 16, 11), (256, 16, 11)]

    def test_identity_at_init_on_taps(self):
        rng = np.random.default_rng(13)
        sel = SEL((4, 4, 8, 8), r=4, identity_init=True, rng=rng, dtype=np.float64)
        taps = random_taps(rng, (4, 4, 8, 8), grid=(4, 3), lead=(2,))
        outs = sel(taps)
        for out, tap in zip(outs[2:], taps[2:]):
            np.testing.assert_array_equal(out.data, tap)

    @given(st.integers(0, 10_000), st.floats(0.1, 1e3))
    def test_gates_strictly_inside_unit_interval(self, seed, scale):
        rng = np.random.default_rng(seed)
        sel = SEL((4, 4, 8, 8), r=4, rng=rng)
        for g in sel.gate_convs:
            g.data *= scale
        with no_tape():
            gates = sel.gates(rng.normal(size=(2, 6, 4, 3)).astype(np.float32) * scale)
        for g in gates:
            assert np.all((g.data > 0) & (g.data < 1))

    def test_mirror_equivariant(self):
        rng = np.random.default_rng(14)
        sel = SEL((4, 4, 8, 8), r=4, rng=rng, dtype=np.float64).eval()
        taps = random_taps(rng, (4, 4, 8, 8), grid=(4, 3), lead=(2,))
        outs, outs_m = sel(taps), sel([mirror(t) for t in taps])
        for a, b in zip(outs, outs_m):
            np.testing.assert_allclose(b.data, mirror(a.data), atol=1e-10)

    def test_grad_check_full_stack(self):
        rng = np.random.default_rng(15)
        sel = SEL((2, 2, 4, 4), r=4, rng=rng, dtype=np.float64)
        taps = random_taps(rng, (2, 2, 4, 4), grid=(3, 2), lead=(2,))
        probes = [rng.normal(size=(2, c, 3, 2)) for c in (2, 2, 4, 4)]

        def loss():
            return sum((o * p).sum() for o, p in zip(sel(taps), probes))

        errs = check_module(sel, loss, max_coords=8)
        assert max(errs.values()) <= 1e-3, errs
