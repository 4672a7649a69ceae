"""Binary checkpoint format.

All integers little-endian.

    offset  size  field
    0       8     magic  b"MLANECK\\x00"
    8       4     version (u32, currently 1)
    12      4     flags (u32): bit 0 = Adam state present, bit 1 = separate critic
    16      4     obs_dim (u32)
    20      4     hidden (u32)
    24      4     n_actions (u32)
    28      4     n_arrays (u32)
    32      ...   shape table, one entry per array in layout order:
                    u16 name length, name (utf-8), u8 ndim, ndim x u32 dims
    ...     ...   parameter payload: float64, arrays concatenated row-major
    ...     ...   if flag bit 0: u64 Adam step t, then m and v payloads (float64,
                  same length as the parameter payload)
    ...     4     metadata length (u32), then that many bytes of UTF-8 JSON
                  (sorted keys, compact separators)

The payload is the in-memory flat vector written verbatim, so a save/load
round trip is bit exact.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .nn import AdamState, Checkpoint, Layout, PolicyParams

MAGIC = b"MLANECK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: PolicyParams, adam: AdamState | None = None, meta: dict[str, Any] | None = None) -> bytes:
    lay = params.layout
    buf = io.BytesIO()
    flags = (1 if adam is not None else 0) | (2 if lay.separate_critic else 0)
    shapes = lay.shapes
    buf.write(MAGIC)
    buf.write(struct.pack("<6I", VERSION, flags, lay.obs_dim, lay.hidden, lay.n_actions, len(shapes)))
    for name, shape in shapes:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(params.flat.astype("<f8").tobytes())
    if adam is not None:
        buf.write(struct.pack("<Q", adam.t))
        buf.write(adam.m.astype("<f8").tobytes())
        buf.write(adam.v.astype("<f8").tobytes())
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, flags, obs_dim, hidden, n_actions, n_arrays = struct.unpack("<6I", take(24))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layout = Layout(obs_dim, hidden, n_actions, bool(flags & 2))
    expected = layout.shapes
    if n_arrays != len(expected):
        raise CheckpointError("shape table does not match layout")
    for name, shape in expected:
        (n,) = struct.unpack("<H", take(2))
        got_name = bytes(take(n)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if got_name != name or tuple(dims) != shape:
            raise CheckpointError(f"shape table mismatch at {got_name}{dims}, expected {name}{shape}")
    size = layout.size
    flat = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
    adam = None
    if flags & 1:
        (t,) = struct.unpack("<Q", take(8))
        m = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        v = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        adam = AdamState(m, v, int(t))
    (n_meta,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n_meta)).decode("utf-8")) if n_meta else {}
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(PolicyParams(layout, flat), adam, meta)


def save(path: str | Path, params: PolicyParams, adam: AdamState | None = None,
         meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, adam, meta))
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
