"""Writer (and self-check reader) for the engine's SAPEMB01 embedding file.

Layout, little-endian: 8-byte magic `SAPEMB01`, u32 dim, u64 count, then per
record a u32 key length, the UTF-8 key, and dim float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .fileio import AdapterError, atomic_write

MAGIC = b"SAPEMB01"
_HEADER = struct.Struct("<IQ")
_KEYLEN = struct.Struct("<I")


def write_embeddings(path: str | Path, dim: int, entries: Iterable[tuple[str, np.ndarray]]) -> int:
    """Atomically write entries (key, float32 vector) and return the count."""
    if dim <= 0:
        raise AdapterError(f"dim must be positive, got {dim}")
    rows = []
    for key, vec in entries:
        arr = np.ascontiguousarray(vec, dtype="<f4").reshape(-1)
        if arr.shape[0] != dim:
            raise AdapterError(f"key {key!r}: {arr.shape[0]} components, expected {dim}")
        rows.append((key, arr))
    with atomic_write(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(dim, len(rows)))
        for key, arr in rows:
            raw = key.encode("utf-8")
            fh.write(_KEYLEN.pack(len(raw)))
            fh.write(raw)
            fh.write(arr.tobytes())
    return len(rows)


def read_embeddings(path: str | Path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    """Self-check reader; the engine's loader is the authoritative consumer."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise AdapterError(f"bad magic in {path}")
    dim, count = _HEADER.unpack_from(data, len(MAGIC))
    offset = len(MAGIC) + _HEADER.size
    entries = []
    for _ in range(count):
        (key_len,) = _KEYLEN.unpack_from(data, offset)
        offset += _KEYLEN.size
        key = data[offset : offset + key_len].decode("utf-8")
        offset += key_len
        entries.append((key, np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()))
        offset += dim * 4
    return dim, entries
