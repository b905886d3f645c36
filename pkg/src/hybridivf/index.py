"""Disk-resident hybrid IVF-Flat index.

An index directory holds the centroids, one contiguous ``lists.bin`` with
every cell's ids, attributes and vectors, a per-cell append segment for
inserted rows, the attribute codebook, and ``manifest.json`` which is the
commit point for both builds and inserts.

After :func:`open_index` the centroids and every attribute block are in
memory; vector blocks stay on disk (memory-mapped, untouched) until a
search selects rows from them.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .clustering import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_MAX_ITERS,
    CentroidSet,
    KMeansMode,
    assign,
    default_k,
    train_kmeans,
)
from .core import (
    ATTR_DTYPE,
    VECTOR_DTYPE,
    Metric,
    UsageError,
    as_matrix,
    as_vector,
    normalize,
    normalize_rows,
)
from .filters import AttributeCodebook

logger = logging.getLogger(__name__)

FORMAT_NAME = "hybridivf"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
CENTROIDS = "centroids.bin"
LISTS = "lists.bin"
CODEBOOK = "codebook.json"
SEGMENTS = "segments"


class IndexFormatError(storage.FormatError):
    pass


@dataclass
class ListEntry:
    cell: int
    count: int
    base_count: int
    segment_rows: int
    ids_offset: int
    attrs_offset: int
    vectors_offset: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class IndexManifest:
    metric: Metric
    dim: int
    n_attrs: int
    n_lists: int
    n_records: int
    next_id: int
    lists: list[ListEntry]
    build: dict
    format_version: int = FORMAT_VERSION
    # Filled by build_index for logging; not persisted.
    build_timings: dict = field(default_factory=dict, compare=False)

    @property
    def mean_list_size(self) -> float:
        return self.n_records / self.n_lists

    def to_json(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "format_version": self.format_version,
            "metric": self.metric.value,
            "dim": self.dim,
            "n_attrs": self.n_attrs,
            "n_lists": self.n_lists,
            "n_records": self.n_records,
            "next_id": self.next_id,
            "files": {"centroids": CENTROIDS, "lists": LISTS, "codebook": CODEBOOK, "segments": SEGMENTS},
            "lists": [e.to_json() for e in self.lists],
            "build": self.build,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IndexManifest":
        try:
            if doc.get("format") != FORMAT_NAME:
                raise IndexFormatError(f"not a {FORMAT_NAME} manifest")
            if doc["format_version"] != FORMAT_VERSION:
                raise IndexFormatError(f"unsupported manifest version {doc['format_version']}")
            m = cls(
                metric=Metric.parse(doc["metric"]),
                dim=int(doc["dim"]),
                n_attrs=int(doc["n_attrs"]),
                n_lists=int(doc["n_lists"]),
                n_records=int(doc["n_records"]),
                next_id=int(doc["next_id"]),
                lists=[ListEntry(**e) for e in doc["lists"]],
                build=dict(doc.get("build", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IndexFormatError(f"malformed manifest: {exc}") from None
        return m

    def validate(self, lists_size: int) -> None:
        if self.n_lists < 1 or len(self.lists) != self.n_lists:
            raise IndexFormatError("manifest list table does not match n_lists")
        if sum(e.count for e in self.lists) != self.n_records:
            raise IndexFormatError("list counts do not sum to n_records")
        pos = storage.LISTS_HEADER_SIZE
        for i, e in enumerate(self.lists):
            if e.cell != i or e.count != e.base_count + e.segment_rows or e.base_count < 0:
                raise IndexFormatError(f"inconsistent list entry for cell {i}")
            expect = (
                pos,
                pos + 8 * e.base_count,
                pos + 8 * e.base_count + 8 * e.base_count * self.n_attrs,
            )
            if (e.ids_offset, e.attrs_offset, e.vectors_offset) != expect:
                raise IndexFormatError(f"offsets for cell {i} overlap or are out of order")
            pos = e.vectors_offset + 4 * e.base_count * self.dim
        if pos != lists_size:
            raise IndexFormatError(f"{LISTS} is {lists_size} bytes, manifest describes {pos}")


@dataclass
class LoadStats:
    """Disk traffic for vector rows. Attribute reads are free (memory-resident)."""

    lists_loaded: int = 0
    vector_rows_read: int = 0
    bytes_read: int = 0
    cache_hits: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ListView:
    """One cell as seen by a snapshot. ``ids``/``attrs`` are in memory."""

    cell: int
    ids: np.ndarray
    attrs: np.ndarray
    base_vectors: np.ndarray | None  # memmap slice, never materialized here
    segment_vectors: np.ndarray | None  # memmap field view over the segment file

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @property
    def base_count(self) -> int:
        return 0 if self.base_vectors is None else int(self.base_vectors.shape[0])


@dataclass(frozen=True)
class Snapshot:
    lists: tuple[ListView, ...]
    n_records: int


class _BlockCache:
    """LRU of whole base vector blocks keyed by cell."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._blocks: OrderedDict[tuple[int, int], np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            block = self._blocks.get(key)
            if block is not None:
                self._blocks.move_to_end(key)
            return block

    def put(self, key, block: np.ndarray) -> None:
        with self._lock:
            self._blocks[key] = block
            self._blocks.move_to_end(key)
            while len(self._blocks) > self.capacity:
                self._blocks.popitem(last=False)

    def clear(self) -> None:
        with self._lock:
            self._blocks.clear()


def _segment_path(root: Path, cell: int) -> Path:
    return root / SEGMENTS / f"{cell:06d}.seg"


def _write_manifest(root: Path, manifest: IndexManifest) -> None:
    data = json.dumps(manifest.to_json(), indent=1).encode("utf-8")
    storage._write_atomic(root / MANIFEST, lambda fh: fh.write(data))


class HybridIndex:
    """Handle over an index directory. Use :func:`open_index` to create one.

    Searches read :attr:`snapshot` once and work on that immutable view, so
    they never block each other or the single writer; :meth:`add_vector`
    publishes a fresh snapshot when an insert commits.
    """

    def __init__(self, root: Path, writable: bool = False, cache_capacity: int = 0):
        self.root = Path(root)
        self.writable = writable
        try:
            doc = json.loads((self.root / MANIFEST).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise IndexFormatError(f"{self.root}: no {MANIFEST}") from None
        except json.JSONDecodeError as exc:
            raise IndexFormatError(f"{self.root / MANIFEST}: invalid JSON ({exc})") from None
        self.manifest = IndexManifest.from_json(doc)
        self.metric = self.manifest.metric
        self.dim = self.manifest.dim
        self.n_attrs = self.manifest.n_attrs

        self.centroids = storage.read_centroids(self.root / CENTROIDS)
        if self.centroids.shape != (self.manifest.n_lists, self.dim):
            raise IndexFormatError(
                f"{CENTROIDS} shape {self.centroids.shape} does not match manifest "
                f"({self.manifest.n_lists}, {self.dim})"
            )
        lists_size = storage.check_lists_header(self.root / LISTS)
        self.manifest.validate(lists_size)
        codebook_path = self.root / CODEBOOK
        self.codebook = (
            AttributeCodebook.load(codebook_path)
            if codebook_path.exists()
            else AttributeCodebook.integers(self.n_attrs)
        )

        self._write_lock = threading.Lock()
        self._cache = _BlockCache(cache_capacity) if cache_capacity > 0 else None
        self._generation = 0
        self.load_stats = LoadStats()
        self.snapshot = self._load_snapshot()

    # -- opening -------------------------------------------------------------

    def _load_snapshot(self) -> Snapshot:
        m = self.manifest
        mm = None
        if any(e.base_count for e in m.lists):
            mm = np.memmap(self.root / LISTS, dtype=np.uint8, mode="r")
        views = []
        for e in m.lists:
            ids = np.empty(0, dtype=np.uint64)
            attrs = np.empty((0, self.n_attrs), dtype=ATTR_DTYPE)
            base = None
            if e.base_count:
                ids = np.array(mm[e.ids_offset:e.attrs_offset].view(storage.U64))
                attrs = np.array(mm[e.attrs_offset:e.vectors_offset].view(storage.I64)).reshape(
                    e.base_count, self.n_attrs
                )
                end = e.vectors_offset + 4 * e.base_count * self.dim
                base = mm[e.vectors_offset:end].view(storage.F32).reshape(e.base_count, self.dim)
            seg = None
            if e.segment_rows:
                seg_rows = self._map_segment(e.cell, e.segment_rows)
                ids = np.concatenate([ids, np.asarray(seg_rows["id"])])
                attrs = np.concatenate([attrs, np.asarray(seg_rows["attrs"])])
                seg = seg_rows["vector"]
            views.append(ListView(e.cell, ids, attrs.astype(ATTR_DTYPE, copy=False), base, seg))
        return Snapshot(tuple(views), m.n_records)

    def _map_segment(self, cell: int, rows: int) -> np.ndarray:
        path = _segment_path(self.root, cell)
        dt = storage.segment_dtype(self.n_attrs, self.dim)
        try:
            size = path.stat().st_size
        except FileNotFoundError:
            raise IndexFormatError(f"missing segment file {path}") from None
        if size < rows * dt.itemsize:
            raise IndexFormatError(f"{path}: truncated ({size} bytes, need {rows * dt.itemsize})")
        return np.memmap(path, dtype=dt, mode="r", shape=(rows,))

    # -- introspection -------------------------------------------------------

    @property
    def k(self) -> int:
        return self.manifest.n_lists

    @property
    def n_records(self) -> int:
        return self.snapshot.n_records

    def list_sizes(self) -> np.ndarray:
        return np.array([v.count for v in self.snapshot.lists], dtype=np.int64)

    def stats(self) -> dict:
        sizes = self.list_sizes()
        mean = float(sizes.mean())
        return {
            "n_records": int(sizes.sum()),
            "n_lists": self.k,
            "mean_list_size": mean,
            "min_list_size": int(sizes.min()),
            "max_list_size": int(sizes.max()),
            # max/mean list size: grows as inserts drift from the trained centroids.
            "skew": float(sizes.max() / mean) if mean else 0.0,
            "segment_rows": int(sum(e.segment_rows for e in self.manifest.lists)),
        }

    def record_cells(self) -> dict[int, int]:
        """Map every record id to its cell (for audits)."""
        out = {}
        for v in self.snapshot.lists:
            for rid in v.ids.tolist():
                out[rid] = v.cell
        return out

    # -- vector loading ------------------------------------------------------

    def load_list_vectors(
        self,
        cell: int,
        selector=None,
        stats: LoadStats | None = None,
        snapshot: Snapshot | None = None,
    ) -> np.ndarray:
        """Rows of cell ``cell`` whose selector bit is set, in list order.

        Only the selected rows are read from disk. ``stats`` (default: the
        handle's :attr:`load_stats`) is charged for the rows actually read.
        """
        snap = snapshot or self.snapshot
        if not 0 <= cell < len(snap.lists):
            raise UsageError(f"cell {cell} out of range [0, {len(snap.lists)})")
        view = snap.lists[cell]
        stats = self.load_stats if stats is None else stats
        if selector is None:
            selector = np.ones(view.count, dtype=bool)
        selector = np.asarray(selector, dtype=bool)
        if selector.shape != (view.count,):
            raise UsageError(f"selector length {selector.shape} does not match list size {view.count}")
        rows = np.flatnonzero(selector)
        if rows.size == 0:
            return np.empty((0, self.dim), dtype=VECTOR_DTYPE)
        base_n = view.base_count
        base_rows = rows[rows < base_n]
        seg_rows = rows[rows >= base_n] - base_n
        parts = []
        disk_rows = 0
        if base_rows.size:
            block = None
            if self._cache is not None:
                key = (self._generation, cell)
                block = self._cache.get(key)
                if block is None:
                    block = self._read(view.base_vectors, None)
                    disk_rows += base_n
                    self._cache.put(key, block)
                else:
                    stats.cache_hits += 1
                parts.append(block[base_rows])
            else:
                parts.append(self._read(view.base_vectors, base_rows))
                disk_rows += base_rows.size
        if seg_rows.size:
            parts.append(self._read(view.segment_vectors, seg_rows))
            disk_rows += seg_rows.size
        stats.lists_loaded += 1
        stats.vector_rows_read += int(disk_rows)
        stats.bytes_read += int(disk_rows) * self.dim * 4
        out = parts[0] if len(parts) == 1 else np.concatenate(parts)
        return np.ascontiguousarray(out, dtype=VECTOR_DTYPE)

    @staticmethod
    def _read(source: np.ndarray, rows: np.ndarray | None) -> np.ndarray:
        try:
            return np.array(source if rows is None else source[rows], dtype=VECTOR_DTYPE)
        except (OSError, ValueError) as exc:  # pragma: no cover - device errors
            raise OSError(f"failed reading vector rows: {exc}") from exc

    # -- inserts -------------------------------------------------------------

    def add_vector(self, core, attrs) -> tuple[int, int]:
        """Insert one record; returns ``(id, cell)``.

        The cell is the nearest centroid to ``core`` (attributes play no
        part). The row is appended to that cell's segment and committed by
        rewriting the manifest, so a failure leaves the previous state intact.
        """
        if not self.writable:
            raise UsageError("index handle is read-only; open with writable=True")
        core = as_vector(core, self.dim)
        if self.metric is Metric.COSINE:
            core = normalize(core)
        attrs = np.asarray(attrs)
        if attrs.shape != (self.n_attrs,):
            raise UsageError(f"expected {self.n_attrs} attributes, got shape {attrs.shape}")
        if attrs.dtype.kind == "f" and not np.all(np.mod(attrs, 1) == 0):
            raise UsageError("attributes must be integers")
        attrs = attrs.astype(ATTR_DTYPE)

        with self._write_lock:
            cell = int(assign(core[None, :], self.centroids, self.metric)[0])
            rid = self.manifest.next_id
            entry = self.manifest.lists[cell]
            dt = storage.segment_dtype(self.n_attrs, self.dim)
            row = np.zeros(1, dtype=dt)
            row["id"] = rid
            row["attrs"] = attrs
            row["vector"] = core

            path = _segment_path(self.root, cell)
            path.parent.mkdir(exist_ok=True)
            committed = entry.segment_rows * dt.itemsize
            with open(path, "ab") as fh:
                # Drop any tail left by an insert that never committed.
                fh.truncate(committed)
                fh.write(row.tobytes())
                fh.flush()
                os.fsync(fh.fileno())

            entry.segment_rows += 1
            entry.count += 1
            self.manifest.n_records += 1
            self.manifest.next_id += 1
            try:
                _write_manifest(self.root, self.manifest)
            except OSError:
                entry.segment_rows -= 1
                entry.count -= 1
                self.manifest.n_records -= 1
                self.manifest.next_id -= 1
                raise

            old = self.snapshot
            view = old.lists[cell]
            seg = self._map_segment(cell, entry.segment_rows)
            new_view = ListView(
                cell,
                np.concatenate([view.ids, np.array([rid], dtype=np.uint64)]),
                np.concatenate([view.attrs, attrs[None, :]]),
                view.base_vectors,
                seg["vector"],
            )
            lists = list(old.lists)
            lists[cell] = new_view
            self.snapshot = Snapshot(tuple(lists), old.n_records + 1)
        return rid, cell

    def flush(self) -> None:
        """Compact every append segment into ``lists.bin`` and drop the segments."""
        if not self.writable:
            raise UsageError("index handle is read-only")
        with self._write_lock:
            if not any(e.segment_rows for e in self.manifest.lists):
                return
            snap = self.snapshot
            entries = _write_lists(
                self.root / LISTS,
                (
                    (v.ids, v.attrs, self.load_list_vectors(v.cell, stats=LoadStats(), snapshot=snap))
                    for v in snap.lists
                ),
                self.n_attrs,
                self.dim,
            )
            self.manifest.lists = entries
            _write_manifest(self.root, self.manifest)
            shutil.rmtree(self.root / SEGMENTS, ignore_errors=True)
            self._generation += 1
            if self._cache is not None:
                self._cache.clear()
            self.snapshot = self._load_snapshot()

    def close(self) -> None:
        self.snapshot = Snapshot((), 0)

    def __enter__(self) -> "HybridIndex":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_index(path, writable: bool = False, cache_capacity: int = 0) -> HybridIndex:
    """Open an index directory.

    ``cache_capacity`` > 0 keeps that many whole vector blocks in an LRU;
    the default keeps nothing and reads only the rows a query selects.
    """
    return HybridIndex(Path(path), writable=writable, cache_capacity=cache_capacity)


def _write_lists(path: Path, blocks, n_attrs: int, dim: int) -> list[ListEntry]:
    """Write lists.bin from ``(ids, attrs, vectors)`` per cell; returns the offset table."""
    entries: list[ListEntry] = []

    def writer(fh):
        fh.write(storage.lists_header())
        pos = storage.LISTS_HEADER_SIZE
        for cell, (ids, attrs, vecs) in enumerate(blocks):
            n = len(ids)
            ids_b = np.ascontiguousarray(ids, dtype=storage.U64).tobytes()
            attrs_b = np.ascontiguousarray(attrs, dtype=storage.I64).reshape(n, n_attrs).tobytes()
            vecs_b = np.ascontiguousarray(vecs, dtype=storage.F32).reshape(n, dim).tobytes()
            entries.append(
                ListEntry(cell, n, n, 0, pos, pos + len(ids_b), pos + len(ids_b) + len(attrs_b))
            )
            fh.write(ids_b)
            fh.write(attrs_b)
            fh.write(vecs_b)
            pos += len(ids_b) + len(attrs_b) + len(vecs_b)

    storage._write_atomic(path, writer)
    return entries


def build_index(
    vectors,
    attrs,
    out,
    metric: Metric | str = Metric.COSINE,
    k: int | None = None,
    kmeans_mode: KMeansMode | str = KMeansMode.LLOYD,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    train_size: int | None = None,
    codebook: AttributeCodebook | None = None,
    overwrite: bool = False,
) -> IndexManifest:
    """Cluster the core vectors and write an index directory at ``out``.

    ``vectors``/``attrs`` are arrays or paths to HVEC/HATT files. Record ids
    are the input row numbers. ``k=None`` applies :func:`default_k`.
    ``train_size`` caps the number of (seeded, randomly chosen) rows used
    for k-means; every row is still assigned.
    """
    t0 = time.perf_counter()
    metric = Metric.parse(metric)
    kmeans_mode = KMeansMode.parse(kmeans_mode)
    if isinstance(vectors, (str, os.PathLike)):
        vectors = storage.read_vectors(vectors)
    if isinstance(attrs, (str, os.PathLike)):
        attrs = storage.read_attrs(attrs)
    vectors = as_matrix(vectors)
    attrs = np.asarray(attrs)
    if attrs.ndim != 2:
        raise UsageError(f"attributes must be an N x M matrix, got shape {attrs.shape}")
    n, dim = vectors.shape
    if attrs.shape[0] != n:
        raise UsageError(f"record count mismatch: {n} vectors vs {attrs.shape[0]} attribute rows")
    if n == 0:
        raise UsageError("cannot build an index from zero records")
    if attrs.dtype.kind not in "iu":
        raise UsageError("attributes must be integer-valued")
    n_attrs = attrs.shape[1]
    k_source = "explicit" if k is not None else "auto"
    k = default_k(n) if k is None else int(k)
    if not 1 <= k <= n:
        raise UsageError(f"K must be in [1, N={n}], got {k}")
    if codebook is not None and len(codebook) != n_attrs:
        raise UsageError(f"codebook has {len(codebook)} attributes, data has {n_attrs}")

    out = Path(out)
    if (out / MANIFEST).exists() and not overwrite:
        raise UsageError(f"{out} already contains an index (pass overwrite=True to replace it)")
    out.mkdir(parents=True, exist_ok=True)
    shutil.rmtree(out / SEGMENTS, ignore_errors=True)

    if metric is Metric.COSINE:
        vectors = normalize_rows(vectors)
    elif not np.all(np.isfinite(vectors)):
        raise UsageError("vectors contain NaN or Inf")
    timings = {"load": time.perf_counter() - t0}

    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    if train_size is not None and train_size < n:
        if train_size < k:
            raise UsageError(f"train_size {train_size} is smaller than K={k}")
        sample = np.sort(rng.choice(n, size=train_size, replace=False))
        train = np.asarray(vectors[sample])
    else:
        train = vectors
    cs: CentroidSet = train_kmeans(
        train, k, mode=kmeans_mode, seed=seed, max_iters=max_iters, batch_size=batch_size, metric=metric
    )
    timings["train"] = time.perf_counter() - t

    t = time.perf_counter()
    labels = assign(vectors, cs)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(k + 1))
    timings["assign"] = time.perf_counter() - t

    t = time.perf_counter()
    attrs_i64 = attrs.astype(ATTR_DTYPE, copy=False)

    def blocks():
        for cell in range(k):
            rows = order[bounds[cell]:bounds[cell + 1]]
            yield rows.astype(np.uint64), attrs_i64[rows], vectors[rows]

    # Any previous manifest goes first so a half-written rebuild cannot be opened.
    (out / MANIFEST).unlink(missing_ok=True)
    entries = _write_lists(out / LISTS, blocks(), n_attrs, dim)
    storage.write_centroids(out / CENTROIDS, cs.centroids)
    (codebook or AttributeCodebook.integers(n_attrs)).save(out / CODEBOOK)
    manifest = IndexManifest(
        metric=metric,
        dim=dim,
        n_attrs=n_attrs,
        n_lists=k,
        n_records=n,
        next_id=n,
        lists=entries,
        build={
            "seed": seed,
            "kmeans_mode": kmeans_mode.value,
            "max_iters": max_iters,
            "batch_size": batch_size,
            "trained_on": cs.trained_on,
            "k_source": k_source,
            "reseeded_clusters": cs.reseeded,
        },
    )
    _write_manifest(out, manifest)
    timings["write"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    manifest.build_timings = timings
    logger.info(
        "built index at %s: N=%d D=%d M=%d K=%d (%s) in %.2fs", out, n, dim, n_attrs, k, k_source, timings["total"]
    )
    return manifest
