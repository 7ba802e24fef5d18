"""Multi-scale fusion: stage taps at one resolution, channel mixing, cross-scale
attention between receptive-field branches, and gated residual re-injection."""
from __future__ import annotations

import numpy as np

from .core import (ConvSpec, Module, NormState, Parameter, ShapeError, Tensor, astensor, bilinear_resize, concat,
                   conv2d, linear, matmul, normalize, open_range, relu, reshape, sigmoid, softmax, split, transpose)
from .reflect import ReflectConv, group_pool, he_init

STAGE_CHANNELS = (32, 64, 128, 256)


def _bn(x: Tensor, state: NormState, mode: str) -> Tensor:
    return normalize(x, "batch_norm", state, mode, axis=x.ndim - 3)


def assemble_multiscale(taps) -> Tensor:
    """Resize every tap to the third tap's grid and concatenate along channels."""
    taps = [astensor(t) for t in taps]
    if len(taps) != 4:
        raise ShapeError("expected four stage taps", *[t.shape for t in taps])
    size = taps[2].shape[-2:]
    if taps[3].shape[-2:] != size:
        raise ShapeError("last two taps must share a grid", taps[2].shape, taps[3].shape)
    lead = taps[0].shape[:-3]
    if any(t.shape[:-3] != lead for t in taps):
        raise ShapeError("taps disagree on leading axes", *[t.shape for t in taps])
    return concat([bilinear_resize(t, size) for t in taps], axis=-3)


class SEL(Module):
    """Scale fusion block over four stage taps.

    ``branch_mode="plain"`` uses k=3 and k=5 branch convs; ``"dilated"`` uses
    k=3 with dilation 1 and 2. With ``reflect=True`` the branch convs are lifted
    to the mirror group and pooled immediately (no extra parameters).
    """

    def __init__(self, channels=STAGE_CHANNELS, r: int = 4, branch_mode: str = "plain", reflect: bool = True,
                 identity_init: bool = False, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.channels = tuple(int(c) for c in channels)
        total = sum(self.channels)
        if r < 1 or total % r:
            raise ValueError(f"channel sum {total} is not divisible by reduction {r}")
        if branch_mode == "plain":
            specs = (ConvSpec(3, 1, 1), ConvSpec(5, 1, 2))
        elif branch_mode == "dilated":
            specs = (ConvSpec(3, 1, 1, 1), ConvSpec(3, 1, 2, 2))
        else:
            raise ValueError(f"unknown branch mode {branch_mode!r}")
        d = total // r
        self.dim = d
        self.reflect = reflect
        self.reduce = Parameter(he_init(rng, (d, total, 1, 1), total, dtype))
        self.reduce_bn = NormState(d, dtype)
        if reflect:
            self.branches = [ReflectConv(d, d, s, False, bias=True, rng=rng, dtype=dtype) for s in specs]
        else:
            self.branches = [_BranchConv(d, s, rng, dtype) for s in specs]
        scale = 1.0 / np.sqrt(d)
        self.wq, self.wk, self.wv = (Parameter((rng.standard_normal((d, d)) * scale).astype(dtype)) for _ in range(3))
        self.bq, self.bk, self.bv = (Parameter(np.zeros(d, dtype)) for _ in range(3))
        self.ffn1 = Parameter((rng.standard_normal((4 * d, d)) * np.sqrt(2.0 / d)).astype(dtype))
        self.ffn1_b = Parameter(np.zeros(4 * d, dtype))
        self.ffn2 = Parameter((rng.standard_normal((d, 4 * d)) * np.sqrt(1.0 / (4 * d))).astype(dtype))
        self.ffn2_b = Parameter(np.zeros(d, dtype))
        expand = np.zeros((total, d, 1, 1), dtype) if identity_init else he_init(rng, (total, d, 1, 1), d, dtype)
        self.expand = Parameter(expand)
        self.expand_bn = NormState(total, dtype)
        self.gate_convs = [Parameter(he_init(rng, (c, c, 1, 1), c, dtype)) for c in self.channels]
        self.gate_bns = [NormState(c, dtype) for c in self.channels]

    def reduce_channels(self, f_init) -> Tensor:
        f_init = astensor(f_init)
        if f_init.shape[-3] != self.reduce.shape[1]:
            raise ShapeError(f"expected {self.reduce.shape[1]} channels", f_init.shape)
        return relu(_bn(conv2d(f_init, self.reduce), self.reduce_bn, self.mode))

    def branch(self, i: int, x: Tensor) -> Tensor:
        y = self.branches[i](x)
        return group_pool(y) if self.reflect else y

    def attention_weights(self, f_c) -> Tensor:
        """Row-stochastic (L x L) map between query tokens and key tokens."""
        q, k, _ = self._qkv(astensor(f_c))
        return softmax(matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(self.dim)), axis=-1)

    def _tokens(self, x: Tensor) -> Tensor:
        """(..., D, H, W) -> (..., L, D)."""
        flat = reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
        return transpose(flat, _swap_last(flat.ndim))

    def _qkv(self, f_c):
        f_c = astensor(f_c)
        s1, s2, s3 = f_c, self.branch(0, f_c), self.branch(1, f_c)
        q = linear(self._tokens(s1), self.wq, self.bq)
        k = linear(self._tokens(s2), self.wk, self.bk)
        v = linear(self._tokens(s3), self.wv, self.bv)
        return q, k, v

    def ffn(self, tokens) -> Tensor:
        return linear(relu(linear(tokens, self.ffn1, self.ffn1_b)), self.ffn2, self.ffn2_b)

    def cross_scale(self, f_c) -> Tensor:
        f_c = astensor(f_c)
        q, k, v = self._qkv(f_c)
        att = softmax(matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(self.dim)), axis=-1)
        out = self.ffn(matmul(att, v))
        h, w = f_c.shape[-2:]
        return reshape(transpose(out, _swap_last(out.ndim)), f_c.shape[:-2] + (h, w))

    def _expanded_parts(self, f_s) -> list[Tensor]:
        expanded = relu(_bn(conv2d(astensor(f_s), self.expand), self.expand_bn, self.mode))
        return split(expanded, self.channels, axis=-3)

    def gates(self, f_s) -> list[Tensor]:
        """Per-stage multiplicative gates, each strictly inside (0, 1)."""
        return [open_range(sigmoid(_bn(conv2d(part, gate), bn, self.mode)))
                for part, gate, bn in zip(self._expanded_parts(f_s), self.gate_convs, self.gate_bns)]

    def gate_and_split(self, f_s, taps) -> list[Tensor]:
        f_s = astensor(f_s)
        parts = self._expanded_parts(f_s)
        size = f_s.shape[-2:]
        outs = []
        for part, tap, gate, bn in zip(parts, taps, self.gate_convs, self.gate_bns):
            tap = bilinear_resize(astensor(tap), size)
            if tap.shape != part.shape:
                raise ShapeError("tap does not match its split", tap.shape, part.shape)
            g = open_range(sigmoid(_bn(conv2d(part, gate), bn, self.mode)))
            outs.append(g * part + tap)
        return outs

    def forward(self, taps) -> list[Tensor]:
        taps = [astensor(t) for t in taps]
        if tuple(t.shape[-3] for t in taps) != self.channels:
            raise ShapeError(f"tap channels must be {self.channels}", *[t.shape for t in taps])
        f_c = self.reduce_channels(assemble_multiscale(taps))
        return self.gate_and_split(self.cross_scale(f_c), taps)


class _BranchConv(Module):
    def __init__(self, d: int, spec: ConvSpec, rng, dtype):
        k = spec.kernel_size
        self.weight = Parameter(he_init(rng, (d, d, k, k), d * k * k, dtype))
        self.bias = Parameter(np.zeros(d, dtype))
        self.spec = spec

    def forward(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def cross_channel_reduce(f_init, params: SEL) -> Tensor:
    return params.reduce_channels(f_init)


def cross_scale_attention(f_c, params: SEL) -> Tensor:
    return params.cross_scale(f_c)


def gate_and_split(f_s, taps, params: SEL) -> list[Tensor]:
    return params.gate_and_split(f_s, taps)
