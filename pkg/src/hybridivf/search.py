"""Filtered IVF search: probe, filter, load, score, merge."""

from __future__ import annotations

import heapq
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Metric, Neighbor, UsageError, as_vector, batch_distances, normalize
from .filters import FilterExpr, eval_filter_block, parse_filter, to_text, validate
from .index import HybridIndex, LoadStats

DEFAULT_PROBES = 7

# Row labels of the timing breakdown, in report order.
TIMING_LABELS = {
    "centroid_search": "Search in centroids",
    "filtering": "Filtering",
    "detailed_search": "Detailed search in clusters",
    "total": "Total",
}


@dataclass(frozen=True)
class Query:
    vector: np.ndarray
    filter: FilterExpr | None = None
    k: int = 10
    probes: int = DEFAULT_PROBES

    def __post_init__(self):
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")
        if self.probes < 1:
            raise UsageError(f"probes must be >= 1, got {self.probes}")

    @classmethod
    def from_json(cls, doc: dict, n_attrs: int | None = None) -> "Query":
        """Build from ``{"vector": [...], "filter": "...", "k": int, "probes": int}``."""
        if "vector" not in doc:
            raise UsageError("query JSON needs a 'vector' field")
        text = doc.get("filter")
        f = parse_filter(text, n_attrs) if text else None
        return cls(
            as_vector(doc["vector"]),
            f,
            int(doc.get("k", 10)),
            int(doc.get("probes") or DEFAULT_PROBES),
        )

    def to_json(self) -> dict:
        doc = {"vector": [float(x) for x in self.vector], "k": self.k, "probes": self.probes}
        if self.filter is not None:
            doc["filter"] = to_text(self.filter)
        return doc


@dataclass
class SearchResult:
    neighbors: list[Neighbor]
    timings: dict[str, float]
    load_stats: LoadStats
    k: int
    probes: int
    probed_cells: list[int] = field(default_factory=list)
    survivors: int = 0

    @property
    def partial(self) -> bool:
        return len(self.neighbors) < self.k

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.neighbors]

    def to_json(self, include_stats: bool = False) -> dict:
        doc = {
            "neighbors": [n.to_dict() for n in self.neighbors],
            "timings": dict(self.timings),
            "partial": self.partial,
        }
        if include_stats:
            doc["probes"] = self.probes
            doc["load_stats"] = self.load_stats.to_json()
            doc["survivors"] = self.survivors
        return doc


class _TopK:
    """Bounded max-heap keeping the ``k`` smallest ``(distance, id)`` pairs."""

    def __init__(self, k: int):
        self.k = k
        self._heap: list[tuple[float, int]] = []  # (-distance, -id)

    def push(self, dist: float, rid: int) -> None:
        item = (-dist, -rid)
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, item)
        elif item > self._heap[0]:
            heapq.heapreplace(self._heap, item)

    def worst(self) -> tuple[float, int] | None:
        if len(self._heap) < self.k:
            return None
        d, r = self._heap[0]
        return -d, -r

    def result(self) -> list[Neighbor]:
        return sorted(Neighbor(-d, -r) for d, r in self._heap)


def _prepare_query_vector(handle: HybridIndex, vector) -> np.ndarray:
    v = as_vector(vector, handle.dim)
    return normalize(v) if handle.metric is Metric.COSINE else v


def nearest_centroids(handle: HybridIndex, vector, t: int) -> list[int]:
    """The ``t`` closest cells, ascending by centroid distance, ties to the lower id."""
    if t < 1:
        raise UsageError(f"probe count must be >= 1, got {t}")
    q = _prepare_query_vector(handle, vector)
    return _nearest_cells(handle, q, t)


def _nearest_cells(handle: HybridIndex, q: np.ndarray, t: int) -> list[int]:
    d = batch_distances(q, handle.centroids, handle.metric)
    order = np.lexsort((np.arange(d.shape[0]), d))
    return order[: min(t, d.shape[0])].tolist()


def search(handle: HybridIndex, q: Query) -> SearchResult:
    t_start = time.perf_counter()
    validate(q.filter, handle.n_attrs)
    vec = _prepare_query_vector(handle, q.vector)
    snap = handle.snapshot
    stats = LoadStats()

    t = time.perf_counter()
    cells = _nearest_cells(handle, vec, q.probes)
    t_centroids = time.perf_counter() - t

    t_filter = 0.0
    t_detail = 0.0
    top = _TopK(q.k)
    survivors = 0
    for cell in cells:
        view = snap.lists[cell]
        if view.count == 0:
            continue
        t = time.perf_counter()
        mask = eval_filter_block(q.filter, view.attrs)
        n_pass = int(np.count_nonzero(mask))
        t_filter += time.perf_counter() - t
        if n_pass == 0:
            continue
        survivors += n_pass

        t = time.perf_counter()
        block = handle.load_list_vectors(cell, mask, stats=stats, snapshot=snap)
        dists = batch_distances(vec, block, handle.metric)
        ids = view.ids[mask]
        # Only this list's k best can enter the global top-k.
        if dists.shape[0] > q.k:
            keep = np.lexsort((ids, dists))[: q.k]
            dists, ids = dists[keep], ids[keep]
        for d, rid in zip(dists.tolist(), ids.tolist()):
            top.push(d, rid)
        t_detail += time.perf_counter() - t

    neighbors = top.result()
    handle.load_stats = stats
    timings = {
        "centroid_search": t_centroids,
        "filtering": t_filter,
        "detailed_search": t_detail,
        "total": time.perf_counter() - t_start,
    }
    return SearchResult(neighbors, timings, stats, q.k, q.probes, cells, survivors)


def search_escalating(handle: HybridIndex, q: Query) -> SearchResult:
    """Double the probe count until ``k`` hits are found or every cell is probed."""
    probes = q.probes
    while True:
        res = search(handle, Query(q.vector, q.filter, q.k, probes))
        if not res.partial or probes >= handle.k:
            return res
        probes = min(handle.k, probes * 2)


def search_batch(
    handle: HybridIndex, queries, parallelism: int = 1
) -> list[SearchResult | Exception]:
    """Run ``queries`` on up to ``parallelism`` threads; output order matches input.

    A query that fails yields its exception in its slot instead of aborting
    the batch.
    """
    if parallelism < 1:
        raise UsageError(f"parallelism must be >= 1, got {parallelism}")

    def run(q):
        try:
            return search(handle, q)
        except Exception as exc:  # reported per slot
            return exc

    queries = list(queries)
    if parallelism == 1 or len(queries) <= 1:
        return [run(q) for q in queries]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, queries))
