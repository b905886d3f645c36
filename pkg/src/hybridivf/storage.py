"""Binary file formats. All multi-byte values are little-endian.

Dataset files::

    vectors  "HVEC" u32 version  u64 N  u32 D   then N*D float32
    attrs    "HATT" u32 version  u64 N  u32 M   then N*M int64

Index files::

    centroids.bin  "HCEN" u32 version u32 K u32 D   then K*D float32
    lists.bin      "HIVF" u32 version, then per cell: ids u64[count],
                   attrs i64[count*M], vectors f32[count*D]
    segments/NNNNNN.seg  appended rows: id u64, attrs i64[M], vector f32[D]
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1

VECTORS_MAGIC = b"HVEC"
ATTRS_MAGIC = b"HATT"
CENTROIDS_MAGIC = b"HCEN"
LISTS_MAGIC = b"HIVF"

_DATASET_HEADER = struct.Struct("<4sIQI")
_CENTROIDS_HEADER = struct.Struct("<4sIII")
_LISTS_HEADER = struct.Struct("<4sI")
LISTS_HEADER_SIZE = _LISTS_HEADER.size

F32 = np.dtype("<f4")
I64 = np.dtype("<i8")
U64 = np.dtype("<u8")


class FormatError(OSError):
    """A file on disk is missing, truncated, or has the wrong magic/version."""


def _write_atomic(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        writer(fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_dataset(path, magic: bytes, data: np.ndarray, dtype: np.dtype) -> None:
    path = Path(path)
    n, width = data.shape

    def writer(fh):
        fh.write(_DATASET_HEADER.pack(magic, VERSION, n, width))
        # Chunked so large inputs are never copied whole.
        step = max(1, (1 << 24) // max(1, width * dtype.itemsize))
        for start in range(0, n, step):
            fh.write(np.ascontiguousarray(data[start:start + step], dtype=dtype).tobytes())

    _write_atomic(path, writer)


def _read_dataset(path, magic: bytes, dtype: np.dtype, mmap: bool) -> np.ndarray:
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            header = fh.read(_DATASET_HEADER.size)
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    if len(header) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, n, width = _DATASET_HEADER.unpack(header)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _DATASET_HEADER.size + n * width * dtype.itemsize
    if size < expected:
        raise FormatError(f"{path}: truncated ({size} bytes, expected {expected})")
    if n == 0:
        return np.empty((0, width), dtype=dtype)
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=_DATASET_HEADER.size, shape=(n, width))
    with open(path, "rb") as fh:
        fh.seek(_DATASET_HEADER.size)
        return np.fromfile(fh, dtype=dtype, count=n * width).reshape(n, width)


def write_vectors(path, vectors) -> None:
    _write_dataset(path, VECTORS_MAGIC, np.asarray(vectors), F32)


def read_vectors(path, mmap: bool = True) -> np.ndarray:
    return _read_dataset(path, VECTORS_MAGIC, F32, mmap)


def write_attrs(path, attrs) -> None:
    _write_dataset(path, ATTRS_MAGIC, np.asarray(attrs), I64)


def read_attrs(path, mmap: bool = True) -> np.ndarray:
    return _read_dataset(path, ATTRS_MAGIC, I64, mmap)


def write_centroids(path, centroids: np.ndarray) -> None:
    k, d = centroids.shape

    def writer(fh):
        fh.write(_CENTROIDS_HEADER.pack(CENTROIDS_MAGIC, VERSION, k, d))
        fh.write(np.ascontiguousarray(centroids, dtype=F32).tobytes())

    _write_atomic(Path(path), writer)


def read_centroids(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    if len(raw) < _CENTROIDS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, k, d = _CENTROIDS_HEADER.unpack_from(raw)
    if magic != CENTROIDS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CENTROIDS_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != _CENTROIDS_HEADER.size + k * d * 4:
        raise FormatError(f"{path}: size does not match K={k}, D={d}")
    return np.frombuffer(raw, dtype=F32, offset=_CENTROIDS_HEADER.size).reshape(k, d).astype(np.float32)


def lists_header() -> bytes:
    return _LISTS_HEADER.pack(LISTS_MAGIC, VERSION)


def check_lists_header(path) -> int:
    """Validate lists.bin magic/version; returns the file size."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.read(LISTS_HEADER_SIZE)
        size = path.stat().st_size
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    if len(header) < LISTS_HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version = _LISTS_HEADER.unpack(header)
    if magic != LISTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LISTS_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return size


def segment_dtype(n_attrs: int, dim: int) -> np.dtype:
    return np.dtype([("id", U64), ("attrs", I64, (n_attrs,)), ("vector", F32, (dim,))])


def sha256_file(path, bufsize: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(bufsize):
            h.update(chunk)
    return h.hexdigest()
