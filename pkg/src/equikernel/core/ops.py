"""Neural-network primitives with analytic backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .module import Module
from .tensor import Parameter, ShapeError, Tensor, astensor, emit, needs_of, unbroadcast, where


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")

    @classmethod
    def same(cls, k: int, stride: int = 1, dilation: int = 1) -> "ConvSpec":
        return cls(k, stride, dilation * (k - 1) // 2, dilation)

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.dilation * (self.kernel_size - 1) - 1) // self.stride + 1


def _im2col(xp: np.ndarray, k: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, k, k, Ho, Wo) view."""
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(xp.shape[0], xp.shape[1], k, k, ho, wo),
                      strides=(sn, sc, d * sh, d * sw, s * sh, s * sw), writeable=False)


def _conv_raw(x: np.ndarray, w: np.ndarray, p: int, d: int, s: int, groups: int):
    """Forward conv on (n, C, H, W) arrays; returns the output and the
    (n, G, C/G*k*k, L) column buffer."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (k - 1) - 1) // s + 1
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.ascontiguousarray(_im2col(x, k, d, s, ho, wo)).reshape(n, groups, cg * k * k, ho * wo)
    out = np.matmul(w.reshape(groups, o // groups, cg * k * k)[None], cols)
    return out.reshape(n, o, ho, wo), cols


def conv2d(x, weight, bias=None, spec: ConvSpec | None = None, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is ``(..., C_in, H, W)``; any leading axes (batch, time) are treated
    as independent images. ``weight`` is ``(C_out, C_in // groups, k, k)``.
    """
    x, weight = astensor(x), astensor(weight)
    spec = spec or ConvSpec(weight.shape[-1])
    if x.ndim < 3:
        raise ShapeError("conv2d input needs at least (C, H, W)", x.shape)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d weight must be (C_out, C_in, k, k)", weight.shape)
    k = weight.shape[-1]
    if k != spec.kernel_size:
        raise ShapeError(f"kernel size {k} disagrees with spec {spec.kernel_size}", weight.shape)
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    o = weight.shape[0]
    if c % groups or o % groups or weight.shape[1] * groups != c:
        raise ShapeError(f"channel mismatch for groups={groups}", x.shape, weight.shape)
    ho, wo = spec.out_extent(h), spec.out_extent(w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty with {spec}", x.shape)
    p, d, s = spec.padding, spec.dilation, spec.stride
    n = int(np.prod(lead)) if lead else 1
    cg, og = c // groups, o // groups
    kk = cg * k * k

    out, cols = _conv_raw(x.data.reshape(n, c, h, w), weight.data, p, d, s, groups)
    if bias is not None:
        bias = astensor(bias)
        if bias.shape != (o,):
            raise ShapeError("bias must be (C_out,)", bias.shape, (o,))
        out = out + bias.data[:, None, None]
    inputs = (x, weight) + ((bias,) if bias is not None else ())
    needs = needs_of(*inputs)
    # stride-1 input gradients are a full correlation with the flipped bank
    transpose_ok = groups == 1 and s == 1 and p <= d * (k - 1)

    def backward(g, needs):
        gg = g.reshape(n, groups, og, ho * wo)
        gx = gw = gb = None
        if needs[1]:
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = gg.sum(axis=(0, 3)).reshape(o)
        if needs[0] and transpose_ok:
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_raw(g.reshape(n, o, ho, wo), flipped, d * (k - 1) - p, d, 1, 1)
            gx = gx.reshape(x.shape)
        elif needs[0]:
            wmat = weight.data.reshape(groups, og, kk)
            dcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], gg).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + w].reshape(x.shape)
        return (gx, gw) + ((gb,) if len(needs) > 2 else ())

    return emit(out.reshape(lead + (o, ho, wo)), inputs, needs, backward, x.axes)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_resize(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of the last two axes with align-corners mapping."""
    x = astensor(x)
    th, tw = size
    if th < 1 or tw < 1:
        raise ShapeError(f"target size {size} must be positive", x.shape)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize needs (..., H, W)", x.shape)
    h, w = x.shape[-2:]
    if (h, w) == (th, tw):
        needs = needs_of(x)
        return emit(x.data.copy(), (x,), needs, lambda g, n: (g,), x.axes)
    rh = _resize_matrix(h, th, x.dtype)
    rw = _resize_matrix(w, tw, x.dtype)
    out = rh @ x.data @ rw.T
    needs = needs_of(x)

    def backward(g, needs):
        return (rh.T @ g @ rw,)

    return emit(out, (x,), needs, backward, x.axes)


def _axis_of(x: Tensor, label: str, axis: int | None) -> int:
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"axis {axis} out of range", x.shape)
        return axis % x.ndim
    if x.axes and label in x.axes:
        return x.axes.index(label)
    raise ShapeError(f"input has no {label!r} axis (labels {x.axes!r})", x.shape)


def _drop_label(axes: str | None, i: int) -> str | None:
    return None if axes is None else axes[:i] + axes[i + 1:]


def pool(x, mode: str, axis: int | None = None, region: tuple[slice, slice] | None = None) -> Tensor:
    """Pooling primitive.

    temporal_max
        max over the T axis (found by label unless ``axis`` is given).
    global_avg
        mean over the trailing H, W axes.
    region_max / region_mean
        reduce the trailing H, W axes inside ``region`` (a pair of slices).
    """
    x = astensor(x)
    if mode == "temporal_max":
        ax = _axis_of(x, "T", axis)
        if x.shape[ax] == 0:
            raise ShapeError("temporal_max over an empty sequence", x.shape)
        out = x.data.max(axis=ax, keepdims=True)
        needs = needs_of(x)

        def backward(g, needs):
            mask = x.data == out
            return (mask * (np.expand_dims(g, ax) / mask.sum(axis=ax, keepdims=True).astype(g.dtype)),)

        return emit(np.squeeze(out, ax), (x,), needs, backward, _drop_label(x.axes, ax))
    if x.ndim < 2:
        raise ShapeError(f"{mode} needs (..., H, W)", x.shape)
    if mode == "global_avg":
        region = (slice(None), slice(None))
    elif mode not in ("region_max", "region_mean"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if region is None:
        raise ValueError(f"{mode} requires a region")
    idx = (Ellipsis,) + tuple(region)
    win = x.data[idx]
    if win.shape[-1] == 0 or win.shape[-2] == 0:
        raise ShapeError(f"empty pooling region {region}", x.shape)
    axes = None if x.axes is None else x.axes[:-2]
    needs = needs_of(x)
    if mode == "region_max":
        out = win.max(axis=(-2, -1))

        def backward(g, needs):
            mask = win == out[..., None, None]
            full = np.zeros_like(x.data)
            full[idx] = mask * (g / mask.sum(axis=(-2, -1)).astype(g.dtype))[..., None, None]
            return (full,)

        return emit(out, (x,), needs, backward, axes)
    cnt = win.shape[-1] * win.shape[-2]

    def backward(g, needs):
        full = np.zeros_like(x.data)
        full[idx] = (g / cnt)[..., None, None]
        return (full,)

    return emit(win.mean(axis=(-2, -1)), (x,), needs, backward, axes)


class NormState(Module):
    """Affine parameters and running statistics for one normalisation layer."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features: int | tuple[int, ...], dtype=np.float32, momentum: float = 0.9,
                 eps: float = 1e-5, affine: bool = True):
        shape = (num_features,) if isinstance(num_features, int) else tuple(num_features)
        self.weight = Parameter(np.ones(shape, dtype)) if affine else None
        self.bias = Parameter(np.zeros(shape, dtype)) if affine else None
        self.running_mean = np.zeros(shape, dtype)
        self.running_var = np.ones(shape, dtype)
        self.momentum = momentum
        self.eps = eps


def normalize(x, kind: str, state: NormState, mode: str = "train", axis: int | tuple[int, ...] = 1) -> Tensor:
    """Batch or layer normalisation.

    ``axis`` names the feature axes that carry per-feature statistics
    (batch_norm) or that are normalised over (layer_norm). Affine parameters
    have the shape of those axes.
    """
    x = astensor(x)
    feat = tuple(a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis))
    fshape = tuple(x.shape[a] for a in feat)
    if state.weight is not None and state.weight.shape != fshape:
        raise ShapeError("normalisation state does not match feature axes", state.weight.shape, fshape)
    if x.size == 0:
        raise ShapeError("cannot normalise an empty tensor", x.shape)
    bshape = [1] * x.ndim
    for a in feat:
        bshape[a] = x.shape[a]
    if kind == "batch_norm":
        red = tuple(i for i in range(x.ndim) if i not in feat)
        if mode == "train":
            mu = x.data.mean(axis=red, keepdims=True)
            var = x.data.var(axis=red, keepdims=True)
            cnt = x.size // int(np.prod(fshape))
            m = state.momentum
            unbiased = var * (cnt / max(cnt - 1, 1))
            new_mean = m * state.running_mean + (1 - m) * mu.reshape(fshape)
            new_var = m * state.running_var + (1 - m) * unbiased.reshape(fshape)
            state.running_mean = new_mean.astype(state.running_mean.dtype)
            state.running_var = new_var.astype(state.running_var.dtype)
        elif mode == "eval":
            mu = state.running_mean.reshape(bshape).astype(x.dtype)
            var = state.running_var.reshape(bshape).astype(x.dtype)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        batch_stats = mode == "train"
    elif kind == "layer_norm":
        red = feat
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        batch_stats = True
    else:
        raise ValueError(f"unknown normalisation {kind!r}")

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = xhat
    inputs: tuple[Tensor, ...] = (x,)
    if state.weight is not None:
        gamma = state.weight.data.reshape(bshape).astype(x.dtype)
        out = xhat * gamma + state.bias.data.reshape(bshape).astype(x.dtype)
        inputs = (x, state.weight, state.bias)
    needs = needs_of(*inputs)
    aff_red = tuple(i for i in range(x.ndim) if i not in feat)

    def backward(g, needs):
        res = [None] * len(inputs)
        gh = g * gamma if state.weight is not None else g
        if needs[0]:
            if batch_stats:
                gm = gh.mean(axis=red, keepdims=True)
                gxm = (gh * xhat).mean(axis=red, keepdims=True)
                res[0] = inv * (gh - gm - xhat * gxm)
            else:
                res[0] = gh * inv
        if state.weight is not None:
            if needs[1]:
                res[1] = (g * xhat).sum(axis=aff_red).reshape(fshape)
            if needs[2]:
                res[2] = g.sum(axis=aff_red).reshape(fshape)
        return tuple(res)

    return emit(out, inputs, needs, backward, x.axes)


def pointwise(x, kind: str) -> Tensor:
    x = astensor(x)
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)
        deriv = lambda: (d > 0).astype(d.dtype)
    elif kind == "sigmoid":
        # split form avoids overflow in exp for large |x|
        e = np.exp(-np.abs(d))
        out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
        deriv = lambda: out * (1 - out)
    elif kind == "softsign":
        den = 1.0 + np.abs(d)
        out = d / den
        deriv = lambda: 1.0 / (den * den)
    else:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    needs = needs_of(x)
    return emit(out, (x,), needs, lambda g, n: (g * deriv(),), x.axes)


def relu(x) -> Tensor:
    return pointwise(x, "relu")


def sigmoid(x) -> Tensor:
    return pointwise(x, "sigmoid")


def softsign(x) -> Tensor:
    return pointwise(x, "softsign")


def open_range(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Nudge entries that rounded onto ``lo`` or ``hi`` to the nearest
    representable interior value, so saturated sigmoid/softsign outputs keep
    their open range. Nudged entries get zero gradient."""
    x = astensor(x)
    t = x.dtype.type
    bot, top = np.nextafter(t(lo), t(hi)), np.nextafter(t(hi), t(lo))
    keep = (x.data > lo) & (x.data < hi)
    if keep.all():
        return x
    return where(keep, x, Tensor(np.clip(x.data, bot, top)))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` along the last axis; weight is (D_out, D_in)."""
    x, weight = astensor(x), astensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear inner dimensions disagree", x.shape, weight.shape)
    out = x.data @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = astensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear bias must be (D_out,)", bias.shape)
        out = out + bias.data
        inputs = inputs + (bias,)
    needs = needs_of(*inputs)

    def backward(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]) if needs[1] else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if len(inputs) > 2 and needs[2] else None
        return (gx, gw) + ((gb,) if len(inputs) > 2 else ())

    return emit(out, inputs, needs, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = astensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    needs = needs_of(x)

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return emit(out, (x,), needs, backward, x.axes)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = astensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    needs = needs_of(x)

    def backward(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return emit(out, (x,), needs, backward, x.axes)


__all__ = [
    "ConvSpec", "conv2d", "bilinear_resize", "pool", "NormState", "normalize", "pointwise",
    "relu", "sigmoid", "softsign", "open_range", "linear", "softmax", "log_softmax", "unbroadcast",
]
