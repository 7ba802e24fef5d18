"""Reflection-equivariant convolutions over the order-2 mirror group.

Channel layout of a grouped feature map: ``[0, C)`` is the regular group and
``[C, 2C)`` the reflected group. Mirroring the input along the width axis
swaps the two groups and mirrors each map; :func:`group_pool` removes the
swap by taking the pairwise maximum.
"""
from __future__ import annotations

import numpy as np

from .core import ConvSpec, Module, NormState, Parameter, ShapeError, Tensor, astensor, concat, conv2d, getitem
from .core import maximum, normalize, relu, reshape


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def mirror(x, axis: int = -1):
    """Flip along the width axis; works on arrays and Tensors."""
    if isinstance(x, Tensor):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(None, None, -1)
        out = getitem(x, tuple(idx))
        out.axes = x.axes
        return out
    return np.flip(x, axis=axis)


def swap_groups(x, axis: int = -3):
    """Exchange the regular and reflected channel halves."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError("grouped feature map needs an even channel count", x.shape)
    h = n // 2
    if isinstance(x, Tensor):
        ax = axis % x.ndim
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[ax], hi[ax] = slice(0, h), slice(h, n)
        return concat([getitem(x, tuple(hi)), getitem(x, tuple(lo))], axis=ax)
    return np.concatenate([np.take(x, range(h, n), axis=axis), np.take(x, range(h), axis=axis)], axis=axis)


def reflect_kernel(weights, grouped_input: bool, swap: bool = True):
    """Derived reflected kernel bank.

    Flips every k x k slice along width; with ``grouped_input`` the input
    channel halves are also exchanged so that deeper layers stay equivariant.
    ``swap=False`` skips that exchange and exists only as a known-broken
    construction for negative controls.
    """
    w = astensor(weights)
    if w.ndim != 4 or w.shape[-1] % 2 == 0:
        raise ShapeError("reflect_kernel needs (C_out, C_in, k, k) with odd k", w.shape)
    flipped = mirror(w)
    if grouped_input and swap:
        flipped = swap_groups(flipped, axis=1)
    elif grouped_input and w.shape[1] % 2:
        raise ShapeError("grouped input needs an even input channel count", w.shape)
    return flipped


class ReflectConv(Module):
    """Convolution emitting ``2 * out_channels`` maps from one learned bank.

    ``grouped=False`` is the lifting layer (plain input); ``grouped=True``
    consumes a grouped map with ``2 * in_channels`` channels. The learned bank
    holds exactly the parameters of a plain conv with ``out_channels`` outputs.

    At stride 1 the reflected group is a convolution with the derived kernel.
    Strided layers with ``mirror_phase`` set compute it as
    ``mirror(conv(swap(mirror(x))))`` instead: identical at stride 1, but the
    subsampling grid is mirrored too, so equivariance stays exact on even
    widths. ``mirror_phase=False`` keeps the plain derived-kernel form.
    """

    def __init__(self, in_channels: int, out_channels: int, spec: ConvSpec, grouped: bool,
                 bias: bool = False, groups: int = 1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if grouped and groups != 1:
            raise ValueError("grouped-input reflect convs support groups=1 only")
        c_in = 2 * in_channels if grouped else in_channels
        k = spec.kernel_size
        self.spec = spec
        self.grouped = grouped
        self.groups = groups
        self.in_channels, self.out_channels = in_channels, out_channels
        fan_in = c_in // groups * k * k
        self.weight = Parameter(he_init(rng, (out_channels, c_in // groups, k, k), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype)) if bias else None
        self.swap = True
        self.mirror_phase = True

    def kernels(self) -> Tensor:
        """Regular and reflected kernels stacked along the output axis."""
        return concat([self.weight, reflect_kernel(self.weight, self.grouped, self.swap)], axis=0)

    def forward(self, x) -> Tensor:
        x = astensor(x)
        expect = 2 * self.in_channels if self.grouped else self.in_channels
        if x.shape[-3] != expect:
            raise ShapeError(f"expected {expect} input channels", x.shape)
        if self.spec.stride > 1 and self.mirror_phase:
            # the reflected group samples the mirrored stride grid, which keeps
            # equivariance exact on even widths
            xm = mirror(x)
            if self.grouped and self.swap:
                xm = swap_groups(xm)
            return concat([conv2d(x, self.weight, self.bias, self.spec, self.groups),
                           mirror(conv2d(xm, self.weight, self.bias, self.spec, self.groups))], axis=-3)
        if self.groups == 1:
            bias = None if self.bias is None else concat([self.bias, self.bias])
            return conv2d(x, self.kernels(), bias, self.spec)
        # grouped convs keep per-group channel order, so run the halves separately
        refl = reflect_kernel(self.weight, self.grouped, self.swap)
        return concat([conv2d(x, self.weight, self.bias, self.spec, self.groups),
                       conv2d(x, refl, self.bias, self.spec, self.groups)], axis=-3)


def lift_conv(x, conv: ReflectConv) -> Tensor:
    if conv.grouped:
        raise ValueError("lift_conv needs an ungrouped bank")
    return conv(x)


def group_conv(x, conv: ReflectConv) -> Tensor:
    if not conv.grouped:
        raise ValueError("group_conv needs a grouped bank")
    return conv(x)


def group_pool(x, mode: str = "max", axis: int = -3) -> Tensor:
    """Collapse the paired channels (i, i + C) of a grouped map."""
    x = astensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if n % 2:
        raise ShapeError("group_pool needs an even channel count", x.shape)
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[ax], hi[ax] = slice(0, n // 2), slice(n // 2, n)
    a, b = getitem(x, tuple(lo)), getitem(x, tuple(hi))
    if mode == "max":
        out = maximum(a, b)
    elif mode == "mean":
        out = (a + b) * 0.5
    else:
        raise ValueError(f"unknown group pool mode {mode!r}")
    out.axes = x.axes
    return out


class PairedBatchNorm(Module):
    """Batch norm whose paired channels (i, i + C) share statistics and affine
    parameters, so the group swap commutes with normalisation."""

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.norm = NormState(channels, dtype)

    def forward(self, x) -> Tensor:
        x = astensor(x)
        lead = x.shape[:-3]
        c2, h, w = x.shape[-3:]
        if c2 != 2 * self.channels:
            raise ShapeError(f"expected {2 * self.channels} grouped channels", x.shape)
        n = int(np.prod(lead)) if lead else 1
        y = normalize(reshape(x, (n, 2, self.channels, h, w)), "batch_norm", self.norm, self.mode, axis=2)
        out = reshape(y, x.shape)
        out.axes = x.axes
        return out


class PlainBatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.norm = NormState(channels, dtype)

    def forward(self, x) -> Tensor:
        x = astensor(x)
        lead = x.shape[:-3]
        n = int(np.prod(lead)) if lead else 1
        y = normalize(reshape(x, (n,) + x.shape[-3:]), "batch_norm", self.norm, self.mode, axis=1)
        out = reshape(y, x.shape)
        out.axes = x.axes
        return out


class PlainConv(Module):
    """Ordinary convolution, used by the non-equivariant baseline."""

    def __init__(self, in_channels: int, out_channels: int, spec: ConvSpec, bias: bool = False,
                 groups: int = 1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        k = spec.kernel_size
        self.spec = spec
        self.groups = groups
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = Parameter(he_init(rng, (out_channels, in_channels // groups, k, k),
                                        in_channels // groups * k * k, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype)) if bias else None

    def forward(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec, self.groups)


class BasicBlock(Module):
    """Two 3x3 convs with BN/ReLU and a residual shortcut.

    With ``reflect=True`` every conv is a grouped ReflectConv and channel
    counts refer to one group; otherwise plain convs of the given widths.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, reflect: bool, rng=None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.reflect = reflect
        s3 = ConvSpec(3, stride, 1)
        s3b = ConvSpec(3, 1, 1)
        if reflect:
            self.conv1 = ReflectConv(in_channels, out_channels, s3, True, rng=rng, dtype=dtype)
            self.bn1 = PairedBatchNorm(out_channels, dtype)
            self.conv2 = ReflectConv(out_channels, out_channels, s3b, True, rng=rng, dtype=dtype)
            self.bn2 = PairedBatchNorm(out_channels, dtype)
        else:
            self.conv1 = PlainConv(in_channels, out_channels, s3, rng=rng, dtype=dtype)
            self.bn1 = PlainBatchNorm(out_channels, dtype)
            self.conv2 = PlainConv(out_channels, out_channels, s3b, rng=rng, dtype=dtype)
            self.bn2 = PlainBatchNorm(out_channels, dtype)
        if stride != 1 or in_channels != out_channels:
            s1 = ConvSpec(1, stride, 0)
            if reflect:
                self.down = ReflectConv(in_channels, out_channels, s1, True, rng=rng, dtype=dtype)
                self.down_bn = PairedBatchNorm(out_channels, dtype)
            else:
                self.down = PlainConv(in_channels, out_channels, s1, rng=rng, dtype=dtype)
                self.down_bn = PlainBatchNorm(out_channels, dtype)
        else:
            self.down = None
            self.down_bn = None

    def set_stride(self, stride: int) -> None:
        self.conv1.spec = ConvSpec(3, stride, 1)
        if self.down is not None:
            self.down.spec = ConvSpec(1, stride, 0)

    def forward(self, x, taps: dict | None = None, prefix: str = "") -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        if taps is not None:
            taps[prefix + "conv1"] = h
        h = self.bn2(self.conv2(h))
        if taps is not None:
            taps[prefix + "conv2"] = h
        short = x if self.down is None else self.down_bn(self.down(x))
        out = relu(h + short)
        out.axes = x.axes if isinstance(x, Tensor) else None
        return out
