"""Adaptive rotation of convolution kernels.

Sign convention: positive angles rotate counter-clockwise in the x-right,
y-down image frame, which looks clockwise on screen. A rotated kernel is
``K_theta(p) = K(R(-theta) p)`` sampled bilinearly about the kernel centre;
points that fall outside the k x k support read as zero. At 90 degrees this
is ``np.rot90(K, k=-1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (ConvSpec, Module, NormState, Parameter, ShapeError, Tensor, astensor, concat, conv2d,
                   getitem, linear, normalize, open_range, pool, relu, sigmoid, softsign, stack)
from .core.tensor import emit, needs_of
from .reflect import ReflectConv, group_pool, he_init, mirror

_SNAP = 1e-9


def _bilinear_rows(sy: np.ndarray, sx: np.ndarray, dsy: np.ndarray, dsx: np.ndarray, h: int, w: int):
    """Sampling matrix (and its derivative along a direction) for points
    ``(sy, sx)`` in pixel coordinates of an ``h x w`` grid with zero fill."""
    n = sy.size
    m = np.zeros((n, h * w))
    dm = np.zeros((n, h * w))
    sy = np.where(np.abs(sy - np.round(sy)) < _SNAP, np.round(sy), sy)
    sx = np.where(np.abs(sx - np.round(sx)) < _SNAP, np.round(sx), sx)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    rows = np.arange(n)
    corners = (
        (0, 0, (1 - fy) * (1 - fx), -dsy * (1 - fx) - (1 - fy) * dsx),
        (0, 1, (1 - fy) * fx, -dsy * fx + (1 - fy) * dsx),
        (1, 0, fy * (1 - fx), dsy * (1 - fx) - fy * dsx),
        (1, 1, fy * fx, dsy * fx + fy * dsx),
    )
    for oy, ox, wt, dwt in corners:
        yy, xx = y0 + oy, x0 + ox
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.add.at(m, (rows[ok], (yy * w + xx)[ok]), wt[ok])
        np.add.at(dm, (rows[ok], (yy * w + xx)[ok]), dwt[ok])
    return m, dm


def _rotation_grid(h: int, w: int, theta_deg: float):
    """Source coordinates of every destination pixel under rotation by
    ``theta_deg`` about the grid centre, plus their derivative per degree."""
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    r, q = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    x, y = (q - cx).ravel(), (r - cy).ravel()
    sx = c * x + s * y
    sy = -s * x + c * y
    k = np.pi / 180.0
    dsx = (-s * x + c * y) * k
    dsy = (-c * x - s * y) * k
    return sy + cy, sx + cx, dsy, dsx


@lru_cache(maxsize=256)
def _rotation_matrix_cached(h: int, w: int, theta_deg: float):
    sy, sx, dsy, dsx = _rotation_grid(h, w, theta_deg)
    m, dm = _bilinear_rows(sy, sx, dsy, dsx, h, w)
    m.setflags(write=False)
    dm.setflags(write=False)
    return m, dm


def rotation_matrix(k: int, theta_deg: float, width: int | None = None):
    """``(M, dM/dtheta)`` with ``vec(K_theta) = M @ vec(K)``; derivative per degree."""
    return _rotation_matrix_cached(k, width or k, float(theta_deg))


def rotate_kernel(kernel, theta) -> Tensor:
    """Rotate every k x k slice of ``kernel`` by ``theta`` degrees.

    Differentiable in both the kernel and the (scalar) angle.
    """
    kernel, theta = astensor(kernel), astensor(theta)
    k = kernel.shape[-1]
    if kernel.ndim < 2 or kernel.shape[-2] != k or k % 2 == 0:
        raise ShapeError("rotate_kernel needs square odd kernels", kernel.shape)
    if theta.size != 1:
        raise ShapeError("rotate_kernel takes one angle", theta.shape)
    m, dm = rotation_matrix(k, float(theta.data.reshape(())))
    flat = kernel.data.reshape(kernel.shape[:-2] + (k * k,))
    out = (flat @ m.T.astype(kernel.dtype)).reshape(kernel.shape)
    needs = needs_of(kernel, theta)

    def backward(g, needs):
        gf = g.reshape(flat.shape)
        gk = (gf @ m.astype(g.dtype)).reshape(kernel.shape) if needs[0] else None
        gt = None
        if needs[1]:
            gt = np.full(theta.shape, np.sum(gf * (flat @ dm.T)), dtype=theta.dtype)
        return gk, gt

    return emit(out, (kernel, theta), needs, backward)


def rotate_image(x: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate the trailing H x W axes about the frame centre, bilinear with
    zero fill, using the same convention as :func:`rotate_kernel`."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    m, _ = _rotation_matrix_cached(h, w, float(theta_deg))
    flat = x.reshape(x.shape[:-2] + (h * w,))
    return (flat @ m.T).astype(x.dtype, copy=False).reshape(x.shape)


@dataclass(frozen=True)
class AngleConfidence:
    """Per-sequence rotation angle (degrees) and confidence in (0, 1)."""
    theta: Tensor
    lam: Tensor


def temporal_aggregate(seq) -> Tensor:
    """Per-element maximum over time; ``seq`` is (T, C, H, W) or (N, T, C, H, W)."""
    seq = astensor(seq)
    axis = seq.ndim - 4
    if seq.ndim < 4:
        raise ShapeError("temporal_aggregate needs (..., T, C, H, W)", seq.shape)
    if seq.shape[axis] == 0:
        raise ShapeError("temporal_aggregate over an empty sequence", seq.shape)
    return pool(seq, "temporal_max", axis=axis)


class RoEL(Module):
    """Angle/confidence predictor plus the adaptive rotated convolution.

    With ``reflect=True`` the two spatial convs are lifted to the mirror group
    and group-pooled right away, so the block keeps reflection equivariance
    without adding parameters.
    """

    def __init__(self, channels: int, theta_limit: float = 40.0, head_conv: str = "depthwise",
                 reflect: bool = True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if head_conv not in ("depthwise", "full"):
            raise ValueError(f"unknown head conv {head_conv!r}")
        self.channels = channels
        self.theta_limit = float(theta_limit)
        self.reflect = reflect
        groups = channels if head_conv == "depthwise" else 1
        spec = ConvSpec(3, 1, 1)
        if reflect:
            self.head = ReflectConv(channels, channels, spec, False, bias=True, groups=groups, rng=rng, dtype=dtype)
        else:
            k_in = channels // groups
            self.head = _Conv(he_init(rng, (channels, k_in, 3, 3), k_in * 9, dtype), np.zeros(channels, dtype),
                              spec, groups)
        self.head_norm = NormState(channels, dtype)
        self.angle_w = Parameter(np.zeros((1, channels), dtype))
        self.angle_b = Parameter(np.zeros(1, dtype))
        self.conf_w = Parameter(np.zeros((1, channels), dtype))
        self.conf_b = Parameter(np.zeros(1, dtype))
        self.rot_kernel = Parameter(he_init(rng, (channels, channels, 3, 3), channels * 9, dtype))

    def trunk(self, f4) -> Tensor:
        """GAP(ReLU(LayerNorm(conv(F4)))) for (C, H, W) or (N, C, H, W) input."""
        f4 = astensor(f4)
        if f4.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} channels", f4.shape)
        h = self.head(f4)
        if self.reflect:
            h = group_pool(h)
        h = relu(normalize(h, "layer_norm", self.head_norm, axis=-3))
        return pool(h, "global_avg")

    def predict(self, f4) -> AngleConfidence:
        z = self.trunk(f4)
        theta = open_range(softsign(linear(z, self.angle_w, self.angle_b)), -1.0) * self.theta_limit
        lam = open_range(sigmoid(linear(z, self.conf_w, self.conf_b)))
        return AngleConfidence(theta, lam)

    def rotate_conv(self, f4, ac: AngleConfidence) -> Tensor:
        """``lambda * conv(F4, rotate_kernel(K, theta))`` per sequence."""
        f4 = astensor(f4)
        if f4.ndim == 3:
            return self._rotate_one(f4, ac.theta, ac.lam)
        outs = [self._rotate_one(getitem(f4, i), getitem(ac.theta, i), getitem(ac.lam, i))
                for i in range(f4.shape[0])]
        return stack(outs, axis=0)

    def _rotate_one(self, f, theta, lam) -> Tensor:
        k = rotate_kernel(self.rot_kernel, theta)
        spec = ConvSpec(3, 1, 1)
        if self.reflect:
            y = group_pool(conv2d(f, concat([k, mirror(k)], axis=0), None, spec))
        else:
            y = conv2d(f, k, None, spec)
        return y * lam.reshape(1, 1, 1)

    def forward(self, f4) -> tuple[Tensor, AngleConfidence]:
        ac = self.predict(f4)
        return self.rotate_conv(f4, ac), ac


def predict_angle_confidence(f4, params: RoEL) -> AngleConfidence:
    return params.predict(f4)


def adaptive_rotate_conv(f4, params: RoEL, ac: AngleConfidence) -> Tensor:
    return params.rotate_conv(f4, ac)


class _Conv(Module):
    def __init__(self, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec, groups: int):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.spec = spec
        self.groups = groups

    def forward(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec, self.groups)


__all__ = ["AngleConfidence", "RoEL", "rotate_kernel", "rotate_image", "rotation_matrix", "temporal_aggregate",
           "predict_angle_confidence", "adaptive_rotate_conv"]
