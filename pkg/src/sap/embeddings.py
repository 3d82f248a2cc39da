"""Embedding storage: load/save, L2 normalization, and cosine scoring.

Vectors are held as 32-bit floats (the precision common encoder exports use);
dot products accumulate in 64-bit for numeric headroom.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"SAPEMB01"
_HEADER = struct.Struct("<IQ")  # dim, count
_KEYLEN = struct.Struct("<I")

NORM_TOLERANCE = 1e-6


class EmbeddingError(ValueError):
    """Malformed embedding data or an invalid embedding operation."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An ordered, keyed set of fixed-dimension float32 vectors.

    Immutable after construction; safe to share across concurrent readers.
    """

    dim: int
    keys: tuple[str, ...]
    vectors: np.ndarray  # shape (len(keys), dim), float32
    _index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise EmbeddingError(f"dim must be positive, got {self.dim}")
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.shape != (len(self.keys), self.dim):
            raise EmbeddingError(
                f"vector block has shape {vecs.shape}, expected ({len(self.keys)}, {self.dim})"
            )
        vecs = np.ascontiguousarray(vecs)
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        index: dict[str, int] = {}
        for row, key in enumerate(self.keys):
            if key in index:
                raise EmbeddingError(f"duplicate key {key!r}")
            index[key] = row
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, Sequence[float]]], dim: int | None = None) -> EmbeddingMatrix:
        keys: list[str] = []
        rows: list[np.ndarray] = []
        for key, vec in entries:
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if dim is None:
                dim = arr.shape[0]
            if arr.shape[0] != dim:
                raise EmbeddingError(f"key {key!r} has {arr.shape[0]} components, expected {dim}")
            keys.append(key)
            rows.append(arr)
        if dim is None:
            raise EmbeddingError("cannot infer dim from an empty entry list; pass dim explicitly")
        block = np.vstack(rows) if rows else np.empty((0, dim), dtype=np.float32)
        return cls(dim=dim, keys=tuple(keys), vectors=block)

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def row(self, key: str) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"no embedding for key {key!r}") from None

    def vector(self, key: str) -> np.ndarray:
        return self.vectors[self.row(key)]

    def entries(self) -> Iterable[tuple[str, np.ndarray]]:
        return zip(self.keys, self.vectors)

    def is_normalized(self, tolerance: float = NORM_TOLERANCE) -> bool:
        if len(self) == 0:
            return True
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= tolerance))


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every vector by its L2 norm; keys and order are preserved.

    Raises EmbeddingError naming the first offending key if a zero vector is
    present.
    """
    norms = np.linalg.norm(m.vectors.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise EmbeddingError(f"zero vector for key {m.keys[zero[0]]!r}")
    # Rows already within tolerance pass through untouched: re-dividing by a
    # norm of 1+eps can flip the last float32 ulp and break idempotence.
    divide = np.abs(norms - 1.0) > NORM_TOLERANCE
    unit = m.vectors.copy()
    if np.any(divide):
        unit[divide] = (m.vectors[divide].astype(np.float64) / norms[divide, None]).astype(np.float32)
    return EmbeddingMatrix(dim=m.dim, keys=m.keys, vectors=unit)


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine of the angle between two vectors: a.b / (|a||b|)."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise EmbeddingError(f"dimension mismatch: {av.shape[0]} vs {bv.shape[0]}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine undefined for a zero-norm vector")
    return float(np.dot(av, bv) / (na * nb))


def scores_against(m: EmbeddingMatrix, query: np.ndarray) -> np.ndarray:
    """Cosine of `query` against every row of `m`, accumulated in float64."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != m.dim:
        raise EmbeddingError(f"dimension mismatch: query has {q.shape[0]}, matrix has {m.dim}")
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise EmbeddingError("cosine undefined for a zero-norm vector")
    block = m.vectors.astype(np.float64)
    norms = np.linalg.norm(block, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise EmbeddingError(f"zero vector for key {m.keys[bad]!r}")
    return (block @ q) / (norms * qn)


def save_embeddings(m: EmbeddingMatrix, path: str | Path) -> None:
    """Write `m` in the SAPEMB01 binary layout (little-endian, float32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(m.dim, len(m)))
        for key, vec in m.entries():
            raw = key.encode("utf-8")
            fh.write(_KEYLEN.pack(len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read a SAPEMB01 file; the inverse of save_embeddings, bit-exact."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise EmbeddingError(f"bad magic in {path}")
    offset = len(MAGIC)
    if len(data) < offset + _HEADER.size:
        raise EmbeddingError(f"truncated header in {path}")
    dim, count = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    if dim == 0:
        raise EmbeddingError(f"header dim is zero in {path}")
    vec_bytes = dim * 4
    keys: list[str] = []
    rows = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        if len(data) < offset + _KEYLEN.size:
            raise EmbeddingError(f"truncated at record {i} of {count} in {path}")
        (key_len,) = _KEYLEN.unpack_from(data, offset)
        offset += _KEYLEN.size
        if len(data) < offset + key_len + vec_bytes:
            raise EmbeddingError(f"truncated at record {i} of {count} in {path}")
        keys.append(data[offset : offset + key_len].decode("utf-8"))
        offset += key_len
        rows[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(data):
        raise EmbeddingError(f"{len(data) - offset} trailing bytes after {count} records in {path}")
    return EmbeddingMatrix(dim=dim, keys=tuple(keys), vectors=rows)
