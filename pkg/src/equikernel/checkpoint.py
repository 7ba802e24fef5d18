"""Single-file little-endian checkpoint.

Layout: ``b"RRSG"``, u32 version, then one record per tensor until end of
file: u32 name length, UTF-8 name, u32 rank, rank x u64 extents, float32
data. Records are written in sorted name order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import ParseError

MAGIC = b"RRSG"
VERSION = 1


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)))
        out.append(key)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_state(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise ParseError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    pos, state = 8, {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"record needs {n} more bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"name is not UTF-8: {e.reason}", pos - n) from None
        if name in state:
            raise ParseError(f"duplicate tensor {name!r}", pos - n)
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return state


def save_checkpoint(path, module) -> None:
    Path(path).write_bytes(encode_state(module.state_dict()))


def load_checkpoint(path, module=None) -> dict[str, np.ndarray]:
    """Read a checkpoint; with ``module`` the tensors are loaded into it
    (missing or unexpected names raise KeyError)."""
    state = decode_state(Path(path).read_bytes())
    if module is not None:
        module.load_state_dict(state)
    return state
