"""End-to-end network: reflect backbone, temporal pooling, adaptive rotation,
scale fusion, horizontal part pooling and the per-part embedding head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (ConvSpec, Module, NormState, Parameter, ShapeError, Tensor, astensor, concat, matmul,
                   normalize, pool, relu, reshape, stack, transpose)
from .reflect import BasicBlock, PairedBatchNorm, PlainBatchNorm, PlainConv, ReflectConv, group_pool
from .rotate import RoEL, temporal_aggregate
from .scale import SEL

FRAME_SIZE = (64, 44)
BRANCHES = ("reflect", "rotate", "scale")


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture switches. ``widths`` count one mirror group when ``reel``
    is on; with ``reel`` off the plain baseline uses ``2 * widths`` channels
    so feature widths match."""

    widths: tuple[int, ...] = (32, 64, 128, 256)
    layers: tuple[int, ...] = (1, 1, 1, 1)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    parts: int = 16
    theta_limit: float = 40.0
    reduction: int = 4
    embed_dim: int = 256
    num_classes: int = 10
    audit_mode: bool = False
    reel: bool = True
    roel: bool = True
    sel: bool = True
    gpool: str = "max"
    hp_mode: str = "max_mean"
    head_conv: str = "depthwise"
    branch_mode: str = "plain"
    sel_identity_init: bool = False
    mirror_phase: bool = True
    frame_size: tuple[int, int] = field(default=FRAME_SIZE)

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.layers) != 4 or len(self.strides) != 4:
            raise ValueError("widths, layers and strides need four stages")
        if min(self.layers) < 1 or min(self.widths) < 1:
            raise ValueError("every stage needs at least one block and one channel")
        if self.gpool not in ("max", "mean"):
            raise ValueError(f"gpool must be max or mean, not {self.gpool!r}")
        if self.hp_mode not in ("max_mean", "max"):
            raise ValueError(f"hp_mode must be max_mean or max, not {self.hp_mode!r}")
        if self.parts < 1 or self.embed_dim < 1 or self.num_classes < 1:
            raise ValueError("parts, embed_dim and num_classes must be positive")

    @property
    def stage_strides(self) -> tuple[int, ...]:
        return (1, 1, 1, 1) if self.audit_mode else self.strides

    @property
    def feature_widths(self) -> tuple[int, ...]:
        """Channel count of each pooled stage feature."""
        return self.widths if self.reel else tuple(2 * w for w in self.widths)

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b, on in zip(BRANCHES, (True, self.roel, self.sel)) if on)

    @property
    def num_parts(self) -> int:
        return self.parts * len(self.branches)

    def ablated(self) -> "BackboneConfig":
        return replace(self, reel=False, roel=False, sel=False)


def horizontal_pool(feature, parts: int, mode: str = "max_mean") -> Tensor:
    """Split the height into ``parts`` strips (remainder to the last strip)
    and pool each strip over its full width: (..., C, H, W) -> (..., P, C)."""
    feature = astensor(feature)
    h = feature.shape[-2]
    if parts > h:
        raise ShapeError(f"cannot cut {h} rows into {parts} parts", feature.shape)
    step = h // parts
    vecs = []
    for i in range(parts):
        rows = slice(i * step, h if i == parts - 1 else (i + 1) * step)
        region = (rows, slice(None))
        v = pool(feature, "region_max", region=region)
        if mode == "max_mean":
            v = v + pool(feature, "region_mean", region=region)
        elif mode != "max":
            raise ValueError(f"unknown strip pooling {mode!r}")
        vecs.append(v)
    return stack(vecs, axis=-2)


class Head(Module):
    """Separate per-part linear maps, a per-part batch-norm neck and bias-free
    per-part classifiers. ``in_dims`` lists the input width of each branch."""

    def __init__(self, in_dims: tuple[int, ...], parts: int, embed_dim: int, num_classes: int, rng=None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_dims = tuple(in_dims)
        self.parts = parts
        self.fc = [Parameter((rng.standard_normal((parts, c, embed_dim)) * np.sqrt(1.0 / c)).astype(dtype))
                   for c in self.in_dims]
        total = parts * len(self.in_dims)
        self.neck = NormState((total, embed_dim), dtype)
        self.classifier = Parameter(np.zeros((total, embed_dim, num_classes), dtype))

    def forward(self, branch_parts) -> tuple[Tensor, Tensor, Tensor]:
        """``branch_parts``: one (N, P, C_b) tensor per branch. Returns
        embeddings, neck features and logits, each laid out (parts, N, dim)."""
        if len(branch_parts) != len(self.fc):
            raise ShapeError(f"expected {len(self.fc)} branches, got {len(branch_parts)}")
        embs = []
        for x, w in zip(branch_parts, self.fc):
            x = astensor(x)
            if x.ndim != 3 or x.shape[1:] != (self.parts, w.shape[1]):
                raise ShapeError("part tensor does not match head", x.shape, w.shape)
            embs.append(matmul(transpose(x, (1, 0, 2)), w))
        emb = concat(embs, axis=0)
        neck = normalize(emb, "batch_norm", self.neck, self.mode, axis=(0, 2))
        logits = matmul(neck, self.classifier)
        return emb, neck, logits


@dataclass
class ForwardResult:
    taps: list[Tensor]
    f4: Tensor
    f4_rot: Tensor | None
    scale: Tensor | None
    theta: Tensor | None
    lam: Tensor | None
    embeddings: Tensor
    neck: Tensor
    logits: Tensor
    stages: list[Tensor] = field(default_factory=list)

    def retrieval_vectors(self) -> np.ndarray:
        """(N, parts * embed_dim) concatenated pre-neck part embeddings."""
        e = self.embeddings.data
        return np.ascontiguousarray(e.transpose(1, 0, 2).reshape(e.shape[1], -1))


class Network(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        w0 = cfg.widths[0]
        stem_spec = ConvSpec(3, 1, 1)
        if cfg.reel:
            self.stem = ReflectConv(1, w0, stem_spec, False, rng=rng, dtype=dtype)
            self.stem_bn = PairedBatchNorm(w0, dtype)
        else:
            self.stem = PlainConv(1, 2 * w0, stem_spec, rng=rng, dtype=dtype)
            self.stem_bn = PlainBatchNorm(2 * w0, dtype)
        self.stages = []
        c_in = w0 if cfg.reel else 2 * w0
        for width, n, stride in zip(cfg.widths, cfg.layers, cfg.stage_strides):
            c_out = width if cfg.reel else 2 * width
            blocks = [BasicBlock(c_in if i == 0 else c_out, c_out, stride if i == 0 else 1, cfg.reel, rng, dtype)
                      for i in range(n)]
            self.stages.append(_Stage(blocks))
            c_in = c_out
        fw = cfg.feature_widths
        self.roel = RoEL(fw[3], cfg.theta_limit, cfg.head_conv, cfg.reel, rng, dtype) if cfg.roel else None
        self.sel = SEL(fw, cfg.reduction, cfg.branch_mode, cfg.reel, cfg.sel_identity_init, rng, dtype) \
            if cfg.sel else None
        for m in self.modules():
            if isinstance(m, ReflectConv):
                m.mirror_phase = cfg.mirror_phase
        dims = {"reflect": fw[3], "rotate": fw[3], "scale": sum(fw)}
        self.head = Head(tuple(dims[b] for b in cfg.branches), cfg.parts, cfg.embed_dim, cfg.num_classes, rng, dtype)

    def break_equivariance(self) -> None:
        """Drop the input-group swap from every grouped kernel (negative control)."""
        for m in self.modules():
            if isinstance(m, ReflectConv) and m.grouped:
                m.swap = False

    def _pool_groups(self, x: Tensor) -> Tensor:
        return group_pool(x, self.cfg.gpool) if self.cfg.reel else x

    def forward(self, seq, keep_stages: bool = False) -> ForwardResult:
        """``seq``: (N, T, H, W) or (N, T, 1, H, W) silhouettes in [0, 1]."""
        x = astensor(seq)
        if x.ndim == 4:
            x = reshape(x, x.shape[:2] + (1,) + x.shape[2:])
        if x.ndim != 5 or x.shape[2] != 1:
            raise ShapeError("expected (N, T, H, W) frames", x.shape)
        if tuple(x.shape[-2:]) != tuple(self.cfg.frame_size):
            raise ShapeError(f"frames must be {self.cfg.frame_size}", x.shape)
        n, t = x.shape[:2]
        h = reshape(x, (n * t,) + x.shape[2:])
        h = relu(self.stem_bn(self.stem(h)))
        stages, taps = [h] if keep_stages else [], []
        for stage in self.stages:
            h = stage(h)
            if keep_stages:
                stages.append(h)
            pooled = self._pool_groups(h)
            pooled = reshape(pooled, (n, t) + pooled.shape[1:])
            pooled.axes = "NTCHW"
            taps.append(temporal_aggregate(pooled))
        f4 = taps[3]
        f4_rot = theta = lam = scale = None
        branch_maps = [f4]
        if self.roel is not None:
            f4_rot, ac = self.roel(f4)
            theta, lam = ac.theta, ac.lam
            branch_maps.append(f4_rot)
        if self.sel is not None:
            sel_taps = taps[:3] + [f4_rot if f4_rot is not None else f4]
            scale = concat(self.sel(sel_taps), axis=1)
            branch_maps.append(scale)
        parts = [horizontal_pool(m, self.cfg.parts, self.cfg.hp_mode) for m in branch_maps]
        emb, neck, logits = self.head(parts)
        return ForwardResult(taps, f4, f4_rot, scale, theta, lam, emb, neck, logits, stages)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def forward_backbone(seq, cfg: BackboneConfig, params: Network):
    """(taps, F4, F4_rot, scale feature) for a batch of sequences."""
    if params.cfg != cfg:
        raise ValueError("network was built for a different config")
    r = params(seq)
    return r.taps, r.f4, r.f4_rot, r.scale
