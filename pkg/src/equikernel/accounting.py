"""Closed-form parameter and multiply-accumulate counts per module.

Computed from the config alone (no network is built), so they serve as an
independent check on the instantiated modules. The backbone (stem and
stages) is costed per frame and multiplied by the frame count; the rotation
and scale blocks run once per sequence after temporal pooling. The head is
reported but excluded from backbone totals.
"""
from __future__ import annotations

from dataclasses import dataclass

from .core import ConvSpec
from .model import BackboneConfig


@dataclass(frozen=True)
class Row:
    module: str
    params: int
    macs: int


@dataclass(frozen=True)
class Accounting:
    rows: tuple[Row, ...]
    frames: int

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.module == name:
                return r
        raise KeyError(name)

    @property
    def backbone_params(self) -> int:
        return sum(r.params for r in self.rows if r.module != "head")

    @property
    def backbone_macs(self) -> int:
        return sum(r.macs for r in self.rows if r.module != "head")


def _conv(c_in: int, c_out: int, k: int, hw: tuple[int, int], groups: int = 1, bias: bool = False,
          mirrored: bool = False) -> tuple[int, int]:
    """Params of the stored bank and MACs of the emitted maps; a mirrored
    conv emits both groups from one bank."""
    params = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
    emitted = 2 * c_out if mirrored else c_out
    return params, emitted * (c_in // groups) * k * k * hw[0] * hw[1]


def _block(c_in: int, c_out: int, stride: int, hw, reel: bool):
    spec = ConvSpec(3, stride, 1)
    out_hw = (spec.out_extent(hw[0]), spec.out_extent(hw[1]))
    g = 2 if reel else 1
    bn = 2 * c_out
    p1, m1 = _conv(g * c_in, c_out, 3, out_hw, mirrored=reel)
    p2, m2 = _conv(g * c_out, c_out, 3, out_hw, mirrored=reel)
    params, macs = p1 + p2 + 2 * bn, m1 + m2
    if stride != 1 or c_in != c_out:
        pd, md = _conv(g * c_in, c_out, 1, out_hw, mirrored=reel)
        params, macs = params + pd + bn, macs + md
    return params, macs, out_hw


def roel_counts(c: int, hw, head_conv: str = "depthwise", reel: bool = True) -> tuple[int, int]:
    groups = c if head_conv == "depthwise" else 1
    p_head, m_head = _conv(c, c, 3, hw, groups=groups, bias=True, mirrored=reel)
    p_rot, m_rot = _conv(c, c, 3, hw, mirrored=reel)
    params = p_head + 2 * c + 2 * (c + 1) + p_rot
    macs = m_head + m_rot + 2 * c + c * c * 81
    return params, macs


def sel_counts(widths, r: int, hw, branch_mode: str = "plain", reel: bool = True) -> tuple[int, int]:
    c = sum(widths)
    d = c // r
    tokens = hw[0] * hw[1]
    ks = (3, 5) if branch_mode == "plain" else (3, 3)
    params = c * d + 2 * d
    macs = c * d * tokens
    for k in ks:
        p, m = _conv(d, d, k, hw, bias=True, mirrored=reel)
        params, macs = params + p, macs + m
    params += 3 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
    macs += 3 * d * d * tokens + 2 * tokens * tokens * d + 8 * d * d * tokens
    params += d * c + 2 * c
    macs += d * c * tokens
    for w in widths:
        params += w * w + 2 * w
        macs += w * w * tokens
    return params, macs


def head_counts(cfg: BackboneConfig) -> tuple[int, int]:
    fw = cfg.feature_widths
    dims = {"reflect": fw[3], "rotate": fw[3], "scale": sum(fw)}
    fc = sum(cfg.parts * dims[b] * cfg.embed_dim for b in cfg.branches)
    n = cfg.num_parts
    cls = n * cfg.embed_dim * cfg.num_classes
    return fc + 2 * n * cfg.embed_dim + cls, fc + cls


def count_params_flops(cfg: BackboneConfig, frames: int = 30) -> Accounting:
    if frames < 1:
        raise ValueError("frames must be >= 1")
    hw = tuple(cfg.frame_size)
    w0 = cfg.widths[0] if cfg.reel else 2 * cfg.widths[0]
    p, m = _conv(1, w0, 3, hw, mirrored=cfg.reel)
    rows = [Row("stem", p + 2 * w0, m * frames)]
    c_in = w0
    for i, (width, n, stride) in enumerate(zip(cfg.widths, cfg.layers, cfg.stage_strides), start=1):
        c_out = width if cfg.reel else 2 * width
        params = macs = 0
        for j in range(n):
            bp, bm, hw = _block(c_in if j == 0 else c_out, c_out, stride if j == 0 else 1, hw, cfg.reel)
            params, macs = params + bp, macs + bm
        rows.append(Row(f"stage{i}", params, macs * frames))
        c_in = c_out
    fw = cfg.feature_widths
    if cfg.roel:
        rows.append(Row("roel", *roel_counts(fw[3], hw, cfg.head_conv, cfg.reel)))
    if cfg.sel:
        rows.append(Row("sel", *sel_counts(fw, cfg.reduction, hw, cfg.branch_mode, cfg.reel)))
    rows.append(Row("head", *head_counts(cfg)))
    return Accounting(tuple(rows), frames)
