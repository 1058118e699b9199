"""Versioned binary container for named float32 tensors.

Layout (little-endian throughout):

* magic ``b"FSRT"``, format version u32
* tensor count u32
* per tensor: name length u32, UTF-8 name bytes, rank u32, dims i32 * rank,
  float32 payload in C order
* trailing 8-byte checksum: first 8 bytes of SHA-256 over everything above.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSRT"
VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write ``{name: array}`` to the container; arrays are stored as float32."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(np.asarray(arr.shape, dtype="<i4").tobytes())
        chunks.append(arr.astype("<f4").tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()[:8]
    Path(path).write_bytes(body + digest)


def load_tensors(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise ValueError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = np.frombuffer(body, dtype="<i4", count=rank, offset=pos)
        pos += 4 * rank
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out[name] = arr.astype(np.float32)
    if pos != len(body):
        raise ValueError(f"{path}: trailing bytes in container")
    return out
