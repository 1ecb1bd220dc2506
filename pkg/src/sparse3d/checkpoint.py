"""Flat binary container of named float32 tensors.

Layout (all integers little-endian)::

    magic     8 bytes   b"S3DCKPT\\0"
    version   u32       currently 1
    meta_len  u32       length of a UTF-8 JSON metadata blob (may be 0)
    meta      bytes
    count     u32       number of tensors
    per tensor:
        name_len u32, name (UTF-8)
        rank     u32, extents u64 * rank
        values   float32 * prod(extents), row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"S3DCKPT\0"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray],
                    metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
              struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, metadata)``; tensors are float32 arrays in file order."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    metadata = json.loads(buf[pos:pos + meta_len] or b"{}")
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, metadata
