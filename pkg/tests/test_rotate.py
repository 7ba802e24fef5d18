import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from equikernel.audit import rotation_error, smooth_noise
from equikernel.core import ConvSpec, Parameter, ShapeError, Tensor, conv2d, grad_check, no_tape
from equikernel.reflect import mirror
from equikernel.rotate import (RoEL, adaptive_rotate_conv, predict_angle_confidence, rotate_image, rotate_kernel,
                               temporal_aggregate)
from oracles import rotate_image_scipy, rotate_kernel_scipy

non_grid = st.floats(-80, 80).filter(lambda t: min(abs(t - g) for g in (-90, 0, 90)) > 1.0)


class TestRotateKernel:
    def test_zero_angle_is_identity(self):
        k = np.random.default_rng(0).normal(size=(2, 3, 3, 3))
        np.testing.assert_array_equal(rotate_kernel(k, 0.0).data, k)

    @pytest.mark.parametrize("deg,turns", [(90, -1), (180, 2), (270, 1), (-90, 1)])
    def test_quarter_turns_are_permutations(self, deg, turns):
        k = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
        np.testing.assert_allclose(rotate_kernel(k, float(deg)).data, np.rot90(k, turns, axes=(-2, -1)),
                                   atol=1e-6)

    def test_ninety_on_a_marker(self):
        k = np.zeros((3, 3))
        k[0, 1] = 1.0  # top centre
        out = rotate_kernel(k, 90.0).data
        # turns clockwise on screen: top -> right
        assert out[1, 2] == pytest.approx(1.0) and np.isclose(out.sum(), 1.0)

    @given(st.floats(-180, 180), st.integers(0, 999))
    def test_centre_fixed(self, theta, seed):
        k = np.random.default_rng(seed).normal(size=(2, 2, 5, 5))
        np.testing.assert_allclose(rotate_kernel(k, theta).data[..., 2, 2], k[..., 2, 2], rtol=1e-6, atol=1e-12)

    @given(st.floats(-180, 180), st.sampled_from([3, 5, 7]), st.integers(0, 999))
    def test_matches_scipy_oracle(self, theta, k, seed):
        kern = np.random.default_rng(seed).normal(size=(k, k))
        np.testing.assert_allclose(rotate_kernel(kern[None, None], theta).data[0, 0],
                                   rotate_kernel_scipy(kern, theta), atol=1e-10)

    def test_outside_support_reads_zero(self):
        k = np.zeros((3, 3))
        k[0, 0] = 1.0
        # a corner rotated by 45 degrees lands beyond the 3x3 support
        out = rotate_kernel(k, 45.0).data
        assert out.sum() < 1.0

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            rotate_kernel(np.zeros((1, 1, 4, 4)), 10.0)

    @given(non_grid)
    def test_grad_check_theta(self, theta):
        rng = np.random.default_rng(2)
        k = rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(1, 2, 6, 6))
        f = lambda t: (conv2d(x, rotate_kernel(k, t), None, ConvSpec.same(3)) ** 2).mean()
        assert grad_check(f, np.array(theta), step=1e-4) <= 1e-3

    def test_grad_check_kernel(self):
        rng = np.random.default_rng(3)
        k0 = rng.normal(size=(2, 2, 3, 3))
        probe = rng.normal(size=k0.shape)
        assert grad_check(lambda k: (rotate_kernel(k, 23.0) * probe).sum(), k0) <= 1e-3


class TestRotateImage:
    @given(st.floats(-45, 45), st.integers(0, 999))
    def test_matches_scipy_oracle(self, theta, seed):
        img = np.random.default_rng(seed).random((9, 7))
        np.testing.assert_allclose(rotate_image(img, theta), rotate_image_scipy(img, theta), atol=1e-10)

    def test_zero_is_identity(self):
        img = np.random.default_rng(0).random((2, 6, 5))
        np.testing.assert_array_equal(rotate_image(img, 0.0), img)


class TestSmallAngle:
    def test_zero_angle_has_no_error(self):
        rng = np.random.default_rng(0)
        x = smooth_noise(rng, (1, 33, 33))
        k = rng.normal(size=(1, 1, 3, 3))
        assert rotation_error(x, k, 0.0, True, 8) <= 1e-12

    def test_smooth_five_tap_kernels_benefit(self):
        """Kernels sampled from a smooth oriented filter (first derivative of
        a Gaussian) at k=5: rotating the kernel reduces the error."""
        wins = 0
        for i in range(100):
            rng = np.random.default_rng([7, i])
            x = smooth_noise(rng, (1, 33, 33))
            phi = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:5, 0:5] - 2.0
            u = np.cos(phi) * xx + np.sin(phi) * yy
            kern = (u * np.exp(-(xx ** 2 + yy ** 2) / 2.0))[None, None]
            wins += rotation_error(x, kern, 10.0, True, 8) < rotation_error(x, kern, 10.0, False, 8)
        assert wins >= 95


class TestTemporalAggregate:
    def test_single_frame(self):
        f = np.random.default_rng(0).random((1, 3, 4, 4))
        np.testing.assert_array_equal(temporal_aggregate(f).data, f[0])

    def test_max_of_two(self):
        seq = np.zeros((2, 1, 1, 1))
        seq[0], seq[1] = 1.0, 5.0
        assert temporal_aggregate(seq).data.item() == 5.0

    def test_constant_in_time(self):
        f = np.random.default_rng(1).random((3, 2, 2))
        np.testing.assert_array_equal(temporal_aggregate(np.stack([f] * 4)).data, f)

    def test_empty(self):
        with pytest.raises(ShapeError):
            temporal_aggregate(np.zeros((0, 2, 2, 2)))


class TestPredictor:
    @pytest.mark.parametrize("reflect", [True, False])
    def test_zero_init_heads(self, reflect):
        roel = RoEL(8, 40.0, reflect=reflect, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(3, 8, 16, 11)).astype(np.float32)
        ac = predict_angle_confidence(x, roel)
        np.testing.assert_array_equal(ac.theta.data, 0.0)
        np.testing.assert_array_equal(ac.lam.data, 0.5)

    @pytest.mark.parametrize("limit", [20.0, 30.0, 40.0, 50.0])
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 1e3))
    def test_bounds(self, limit, seed, scale):
        rng = np.random.default_rng(seed)
        roel = RoEL(4, limit, rng=rng, dtype=np.float64)
        for p in roel.parameters():
            p.data = rng.standard_normal(p.shape) * scale
        with no_tape():
            ac = roel.predict(rng.standard_normal((5, 4, 6, 5)) * scale)
        assert np.all(np.abs(ac.theta.data) < limit)
        assert np.all((ac.lam.data > 0) & (ac.lam.data < 1))

    def test_saturated_angle_stays_open(self):
        roel = RoEL(4, 40.0, dtype=np.float64)
        roel.angle_b.data[:] = 1e12
        theta = roel.predict(np.ones((4, 5, 5))).theta.data
        assert 39.999 < theta.item() < 40.0

    def test_branches_independent(self):
        roel = RoEL(4, 40.0, dtype=np.float64)
        roel.conf_b.data[:] = 3.0
        ac = roel.predict(np.ones((4, 5, 5)))
        assert ac.theta.data.item() == 0.0
        assert ac.lam.data.item() == pytest.approx(1 / (1 + math.exp(-3.0)))

    def test_trunk_mirror_invariant(self):
        rng = np.random.default_rng(2)
        roel = RoEL(4, 40.0, rng=rng, dtype=np.float64)
        x = rng.normal(size=(4, 6, 5))
        np.testing.assert_allclose(roel.trunk(mirror(x)).data, roel.trunk(x).data, atol=1e-12)


class TestAdaptiveRotateConv:
    def test_half_regular_conv_at_init(self):
        rng = np.random.default_rng(0)
        roel = RoEL(4, 40.0, reflect=False, rng=rng, dtype=np.float64)
        f4 = rng.normal(size=(4, 16, 11))
        ac = roel.predict(f4)
        out = adaptive_rotate_conv(f4, roel, ac).data
        np.testing.assert_allclose(out, 0.5 * conv2d(f4, roel.rot_kernel, None, ConvSpec.same(3)).data,
                                   atol=1e-12)
        assert out.shape == f4.shape

    def test_lambda_scales_output(self):
        rng = np.random.default_rng(1)
        roel = RoEL(4, 40.0, rng=rng, dtype=np.float64)
        f4 = rng.normal(size=(2, 4, 6, 5))
        full = roel.rotate_conv(f4, roel.predict(f4)).data
        roel.conf_b.data[:] = -60.0
        tiny = roel.rotate_conv(f4, roel.predict(f4)).data
        assert np.abs(tiny).max() < 1e-20 * max(np.abs(full).max(), 1.0) + 1e-20

    def test_reflect_equivariant(self):
        rng = np.random.default_rng(2)
        roel = RoEL(4, 40.0, rng=rng, dtype=np.float64)
        for p in (roel.angle_w, roel.conf_w):
            p.data = rng.normal(size=p.shape)
        f4 = rng.normal(size=(4, 6, 6))
        out, ac = roel(f4)
        out_m, ac_m = roel(mirror(f4))
        np.testing.assert_allclose(ac_m.theta.data, ac.theta.data, atol=1e-12)
        np.testing.assert_allclose(out_m.data, mirror(out.data), atol=1e-10)

    def test_grad_through_predicted_angle(self):
        rng = np.random.default_rng(3)
        f4 = rng.normal(size=(2, 6, 5))

        def f(aw):
            roel = RoEL(2, 40.0, reflect=False, rng=np.random.default_rng(4), dtype=np.float64)
            roel.angle_w = aw
            return (roel(f4)[0] ** 2).mean()

        assert grad_check(f, rng.normal(size=(1, 2)) * 3) <= 1e-3
