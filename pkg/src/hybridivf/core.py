"""Shared domain types and distance kernels.

Vectors are stored as float32; every kernel accumulates in float64 and
narrows the result back to float32. Cosine distance is ``1 - <a, b>`` and
assumes both operands were normalized beforehand (see :func:`normalize`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

VECTOR_DTYPE = np.float32
ATTR_DTYPE = np.int64
ID_DTYPE = np.uint64

# Rows per chunk for kernels that would otherwise materialize n x D float64.
_CHUNK_ROWS = 32768


class UsageError(ValueError):
    """Invalid arguments or inputs (CLI exit code 2)."""


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"

    @classmethod
    def parse(cls, value: "Metric | str") -> "Metric":
        if isinstance(value, Metric):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UsageError(f"unknown metric {value!r}; expected 'euclidean' or 'cosine'") from None


@dataclass(frozen=True, order=True)
class Neighbor:
    """A search hit. Ordering is (distance, id), which is also the tie-break."""

    distance: float
    id: int

    def to_dict(self) -> dict:
        return {"id": int(self.id), "distance": float(self.distance)}


def as_vector(v, dim: int | None = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-D float32 array, optionally checking its length."""
    arr = np.asarray(v, dtype=VECTOR_DTYPE)
    if arr.ndim != 1:
        raise UsageError(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise UsageError(f"dimension mismatch: expected {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise UsageError("vector contains NaN or Inf components")
    return arr


def as_matrix(block, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(block, dtype=VECTOR_DTYPE)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, dim or 0)
    if arr.ndim != 2:
        raise UsageError(f"expected a 2-D matrix, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise UsageError(f"dimension mismatch: expected {dim} columns, got {arr.shape[1]}")
    return arr


def normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm. Zero vectors are rejected."""
    arr = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.dot(arr, arr))
    if not np.isfinite(norm) or norm == 0.0:
        raise UsageError("cannot normalize a zero (or non-finite) vector")
    return (arr / norm).astype(VECTOR_DTYPE)


def normalize_rows(block) -> np.ndarray:
    """Row-wise :func:`normalize`; raises if any row has zero norm."""
    arr = as_matrix(block)
    out = np.empty(arr.shape, dtype=VECTOR_DTYPE)
    for start in range(0, arr.shape[0], _CHUNK_ROWS):
        chunk = arr[start:start + _CHUNK_ROWS].astype(np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", chunk, chunk))
        bad = np.flatnonzero(~(norms > 0.0))
        if bad.size:
            raise UsageError(f"row {start + int(bad[0])} has zero norm and cannot be normalized")
        out[start:start + _CHUNK_ROWS] = chunk / norms[:, None]
    return out


def distance(a, b, metric: Metric | str = Metric.EUCLIDEAN) -> float:
    metric = Metric.parse(metric)
    a = np.asarray(a, dtype=VECTOR_DTYPE).astype(np.float64)
    b = np.asarray(b, dtype=VECTOR_DTYPE).astype(np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric is Metric.EUCLIDEAN:
        diff = a - b
        d = np.sqrt(np.sum(diff * diff))
    else:
        d = max(1.0 - np.sum(a * b), 0.0)
    return float(np.float32(d))


def batch_distances(query, block, metric: Metric | str = Metric.EUCLIDEAN) -> np.ndarray:
    """Distances from ``query`` to every row of ``block`` as float32.

    Row ``i`` of the result matches ``distance(query, block[i])``: the
    per-row reduction is the same elementwise-then-sum, so values do not
    depend on which other rows share the block.
    """
    metric = Metric.parse(metric)
    q = np.asarray(query, dtype=VECTOR_DTYPE)
    if q.ndim != 1:
        raise UsageError(f"expected a 1-D query, got shape {q.shape}")
    block = as_matrix(block, q.shape[0])
    n = block.shape[0]
    out = np.empty(n, dtype=VECTOR_DTYPE)
    q64 = q.astype(np.float64)
    for start in range(0, n, _CHUNK_ROWS):
        chunk = block[start:start + _CHUNK_ROWS].astype(np.float64)
        if metric is Metric.EUCLIDEAN:
            chunk -= q64
            chunk *= chunk
            out[start:start + _CHUNK_ROWS] = np.sqrt(chunk.sum(axis=1))
        else:
            chunk *= q64
            out[start:start + _CHUNK_ROWS] = np.maximum(1.0 - chunk.sum(axis=1), 0.0)
    return out


def squared_euclidean_matrix(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """All-pairs squared L2 via the norm expansion (float64, clipped at 0).

    Fast but not bit-compatible with :func:`batch_distances`; callers that
    need exact argmins refine the near-ties afterwards.
    """
    x = np.asarray(data, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    cc = np.einsum("ij,ij->i", c, c)[None, :]
    d2 = xx + cc - 2.0 * (x @ c.T)
    np.maximum(d2, 0.0, out=d2)
    return d2
