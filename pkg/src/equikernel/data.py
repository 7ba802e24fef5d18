"""Silhouette sequences: container I/O, manifests, a procedural walker and the
geometric probe transforms."""
from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rotate import rotate_image

GSEQ_MAGIC = b"GSEQ"
GSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
FRAME_SIZE = (64, 44)
ROLES = ("train", "gallery", "probe")


class ParseError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GaitSequence:
    frames: np.ndarray
    identity: str = ""
    condition: str = "normal"

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, H, W), got {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return self.frames.shape[0]


def encode_gseq(seq: GaitSequence) -> bytes:
    t, h, w = seq.frames.shape
    payload = np.round(seq.frames * 255.0).astype(np.uint8)
    return _HEADER.pack(GSEQ_MAGIC, GSEQ_VERSION, t, h, w) + payload.tobytes()


def decode_gseq(buf: bytes, identity: str = "", condition: str = "normal") -> GaitSequence:
    if len(buf) < 4:
        raise ParseError("truncated magic", len(buf))
    if buf[:4] != GSEQ_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < _HEADER.size:
        raise ParseError("truncated header", len(buf))
    _, version, t, h, w = _HEADER.unpack_from(buf)
    if version != GSEQ_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if t < 1 or h < 1 or w < 1:
        raise ParseError(f"empty extents {t}x{h}x{w}", 8)
    need = _HEADER.size + t * h * w
    if len(buf) < need:
        raise ParseError(f"payload needs {t * h * w} bytes", len(buf))
    if len(buf) > need:
        raise ParseError("trailing bytes after payload", need)
    frames = np.frombuffer(buf, dtype=np.uint8, count=t * h * w, offset=_HEADER.size)
    return GaitSequence(frames.reshape(t, h, w).astype(np.float32) / 255.0, identity, condition)


def write_gseq(path, seq: GaitSequence) -> None:
    Path(path).write_bytes(encode_gseq(seq))


def read_gseq(path, identity: str = "", condition: str = "normal") -> GaitSequence:
    return decode_gseq(Path(path).read_bytes(), identity, condition)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    identity: str
    condition: str
    role: str


def validate_manifest(entries: list[ManifestEntry]) -> None:
    for e in entries:
        if e.role not in ROLES:
            raise ValueError(f"unknown role {e.role!r} for {e.path}")
    gallery = {e.identity for e in entries if e.role == "gallery"}
    orphans = sorted({e.identity for e in entries if e.role == "probe"} - gallery)
    if orphans:
        raise ValueError(f"probe identities missing from the gallery: {orphans}")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "identity", "condition", "role"]:
            raise ValueError(f"manifest header must be path,identity,condition,role; got {reader.fieldnames}")
        entries = [ManifestEntry(r["path"], r["identity"], r["condition"], r["role"]) for r in reader]
    validate_manifest(entries)
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "identity", "condition", "role"])
        for e in entries:
            w.writerow([e.path, e.identity, e.condition, e.role])


def load_entry(entry: ManifestEntry, root) -> GaitSequence:
    p = Path(entry.path)
    return read_gseq(p if p.is_absolute() else Path(root) / p, entry.identity, entry.condition)


# --- procedural walker -------------------------------------------------------

@dataclass(frozen=True)
class WalkerSpec:
    """Body plan of one synthetic walker. Lateral quantities are signed so the
    mirror image is the same spec with ``facing`` and ``offset`` negated."""

    height: float
    torso_width: float
    head_radius: float
    leg_length: float
    arm_length: float
    stride_deg: float
    arm_swing_deg: float
    knee_bend_deg: float
    lean_deg: float
    period: float
    phase: float
    facing: float
    offset: float
    limb_radius: float

    def mirrored(self) -> "WalkerSpec":
        return replace(self, facing=-self.facing, offset=-self.offset)


def walker_spec(identity_seed: int, seq_index: int = 0) -> WalkerSpec:
    """Identity traits come from ``identity_seed``; ``seq_index`` only moves
    the start phase and the horizontal placement."""
    r = np.random.default_rng([int(identity_seed), 7919])
    traits = dict(
        height=r.uniform(46.0, 58.0),
        torso_width=r.uniform(3.0, 6.0),
        head_radius=r.uniform(3.2, 5.0),
        leg_length=r.uniform(0.44, 0.54),
        arm_length=r.uniform(0.30, 0.40),
        stride_deg=r.uniform(14.0, 34.0),
        arm_swing_deg=r.uniform(8.0, 30.0),
        knee_bend_deg=r.uniform(5.0, 30.0),
        lean_deg=r.uniform(0.0, 8.0),
        period=r.uniform(12.0, 20.0),
        limb_radius=r.uniform(1.3, 2.3),
    )
    n = np.random.default_rng([int(identity_seed), int(seq_index), 104729])
    return WalkerSpec(phase=n.uniform(0.0, 2 * np.pi), facing=1.0, offset=n.uniform(-2.0, 2.0), **traits)


def _capsule(u, v, a, b, radius):
    """Mask of points within ``radius`` of segment a-b; points are (u, v)."""
    du, dv = b[0] - a[0], b[1] - a[1]
    pu, pv = u - a[0], v - a[1]
    t = np.clip((pu * du + pv * dv) / max(du * du + dv * dv, 1e-12), 0.0, 1.0)
    eu, ev = pu - t * du, pv - t * dv
    return eu * eu + ev * ev <= radius * radius


def _limb(origin, length, angle_deg, facing):
    a = np.deg2rad(angle_deg)
    return (origin[0] + facing * length * np.sin(a), origin[1] + length * np.cos(a))


def render_walker(spec: WalkerSpec, frames: int, size=FRAME_SIZE) -> np.ndarray:
    """Binary (T, H, W) silhouettes. Columns use centred coordinates so that
    mirroring the walker spec mirrors the frames exactly."""
    h, w = size
    v, q = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u = q - (w - 1) / 2.0
    f = spec.facing
    top = (h - spec.height) / 2.0
    leg = spec.leg_length * spec.height
    arm = spec.arm_length * spec.height
    hip_v = top + spec.height - leg
    head_v = top + spec.head_radius
    shoulder_v = head_v + spec.head_radius + 1.5
    lean = np.deg2rad(spec.lean_deg)
    out = np.zeros((frames, h, w), dtype=np.float32)
    for t in range(frames):
        phi = 2 * np.pi * t / spec.period + spec.phase
        bob = 0.8 * abs(np.cos(phi))
        hip = (spec.offset, hip_v - bob)
        shoulder = (spec.offset + f * np.tan(lean) * (hip_v - shoulder_v), shoulder_v - bob)
        head = (shoulder[0] + f * 0.6, head_v - bob)
        mask = _capsule(u, v, hip, shoulder, spec.torso_width)
        dh = (u - head[0], v - head[1])
        mask |= dh[0] ** 2 + dh[1] ** 2 <= spec.head_radius ** 2
        # facing cue: a nose bump on the front of the head
        mask |= _capsule(u, v, head, (head[0] + f * (spec.head_radius + 1.0), head[1] + 0.5), 0.9)
        for side in (1.0, -1.0):
            swing = side * spec.stride_deg * np.sin(phi)
            knee = _limb(hip, leg / 2, swing, f)
            bend = spec.knee_bend_deg * max(0.0, np.sin(phi + side * np.pi / 2))
            foot = _limb(knee, leg / 2, swing - bend, f)
            mask |= _capsule(u, v, hip, knee, spec.limb_radius)
            mask |= _capsule(u, v, knee, foot, spec.limb_radius)
            mask |= _capsule(u, v, foot, (foot[0] + f * 2.5, foot[1]), spec.limb_radius * 0.8)
            elbow = _limb(shoulder, arm / 2, -swing * spec.arm_swing_deg / spec.stride_deg, f)
            hand = _limb(elbow, arm / 2, -swing * spec.arm_swing_deg / spec.stride_deg + 10.0, f)
            mask |= _capsule(u, v, shoulder, elbow, spec.limb_radius * 0.8)
            mask |= _capsule(u, v, elbow, hand, spec.limb_radius * 0.7)
        out[t] = mask
    return out


def synth_walker(identity_seed: int, frames: int = 30, condition: str = "normal", seq_index: int = 0) -> GaitSequence:
    """Render one sequence. ``condition`` is one of ``normal``, ``reflect``,
    ``rot+N`` / ``rot-N`` (degrees), ``dilateN`` or ``erodeN``; reflection is
    rendered from the mirrored spec, the rest through :func:`apply_transform`."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    spec = walker_spec(identity_seed, seq_index)
    kind, arg = parse_condition(condition)
    if kind == "reflect":
        spec = spec.mirrored()
    seq = GaitSequence(render_walker(spec, frames), str(identity_seed), "normal")
    if kind in ("normal", "reflect"):
        return replace(seq, condition=condition)
    return apply_transform(seq, kind, 1.0, param=arg)


_COND = re.compile(r"^(normal|reflect|rot([+-]\d+(?:\.\d+)?)|(dilate|erode)(\d+))$")


def parse_condition(condition: str) -> tuple[str, float]:
    m = _COND.match(condition)
    if not m:
        raise ValueError(f"unknown condition {condition!r}")
    if m.group(2) is not None:
        return "rotate", float(m.group(2))
    if m.group(3) is not None:
        return m.group(3), float(m.group(4))
    return m.group(1), 0.0


# --- transforms ----------------------------------------------------------------

_CROSS = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def _shift(x: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    out = np.full_like(x, fill)
    h, w = x.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def dilate(x: np.ndarray, iters: int = 1) -> np.ndarray:
    """Grey-level dilation with a 3x3 cross; outside the frame counts as 0."""
    for _ in range(iters):
        x = np.max([_shift(x, dy, dx, 0.0) for dy, dx in _CROSS], axis=0)
    return x


def erode(x: np.ndarray, iters: int = 1) -> np.ndarray:
    for _ in range(iters):
        x = np.min([_shift(x, dy, dx, 0.0) for dy, dx in _CROSS], axis=0)
    return x


def mirror_frames(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def apply_transform(seq: GaitSequence, kind: str, probability: float = 1.0, rng=None,
                    param: float = 0.0) -> GaitSequence:
    """Apply one transform to every frame, with ``probability`` per sequence.

    ``param`` is the angle in degrees for ``rotate`` and the iteration count
    for ``dilate``/``erode``.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if kind == "rotate" and abs(param) > 45.0:
        raise ValueError(f"rotation {param} exceeds 45 degrees")
    if kind in ("dilate", "erode") and (param < 0 or param != int(param)):
        raise ValueError("morphology iterations must be a non-negative integer")
    if kind not in ("reflect", "rotate", "dilate", "erode"):
        raise ValueError(f"unknown transform {kind!r}")
    if probability < 1.0:
        rng = rng if rng is not None else np.random.default_rng()
        if rng.random() >= probability:
            return seq
    f = seq.frames
    if kind == "reflect":
        out, tag = mirror_frames(f), "reflect"
    elif kind == "rotate":
        out, tag = np.clip(rotate_image(f.astype(np.float64), param), 0.0, 1.0), f"rot{param:+g}"
    elif kind == "dilate":
        out, tag = dilate(f, int(param)), f"dilate{int(param)}"
    else:
        out, tag = erode(f, int(param)), f"erode{int(param)}"
    return GaitSequence(out.astype(np.float32), seq.identity, tag)


@dataclass
class ToySplit:
    train: list[GaitSequence]
    gallery: list[GaitSequence]
    probes: list[GaitSequence]
    clean_probes: list[GaitSequence]


def probe_conditions(rotation_deg: float = 20.0, dilate_iters: int = 1) -> list[str]:
    return ["reflect", f"rot+{rotation_deg:g}", f"rot-{rotation_deg:g}", f"dilate{dilate_iters}"]


def toy_split(identities: int = 10, seqs_per_identity: int = 12, train_seqs: int = 6, gallery_seqs: int = 2,
              frames: int = 30, rotation_deg: float = 20.0, dilate_iters: int = 1) -> ToySplit:
    """Per identity: the first ``train_seqs`` renders train, the next
    ``gallery_seqs`` enrol, and the rest become probes cycling through
    reflect / rotate +-deg / dilate. ``clean_probes`` are the same probe
    sequences without their transform."""
    if train_seqs + gallery_seqs >= seqs_per_identity:
        raise ValueError("no sequences left for probes")
    conds = probe_conditions(rotation_deg, dilate_iters)
    split = ToySplit([], [], [], [])
    for ident in range(identities):
        for s in range(seqs_per_identity):
            base = synth_walker(ident, frames, "normal", seq_index=s)
            if s < train_seqs:
                split.train.append(base)
            elif s < train_seqs + gallery_seqs:
                split.gallery.append(base)
            else:
                cond = conds[(s - train_seqs - gallery_seqs) % len(conds)]
                split.clean_probes.append(base)
                split.probes.append(synth_walker(ident, frames, cond, seq_index=s))
    return split
