"""Ground truth, synthetic data and recall measurement.

Nothing in here touches the index structure except :func:`measure_recall`,
which runs the index being measured.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .core import VECTOR_DTYPE, Metric, Neighbor, UsageError, as_matrix, batch_distances, normalize
from .filters import And, FilterExpr, Op, Or, Predicate, eval_filter_block, validate
from .index import HybridIndex
from .search import TIMING_LABELS, Query, SearchResult, search_batch

ATTR_LOW = -32768
ATTR_HIGH = 32767
_ATTR_SPAN = ATTR_HIGH - ATTR_LOW + 1
_SCAN_CHUNK = 65536


def _query_vector(q: Query, metric: Metric) -> np.ndarray:
    return normalize(q.vector) if metric is Metric.COSINE else np.asarray(q.vector, dtype=VECTOR_DTYPE)


def exact_filtered_knn(vectors, attrs, q: Query, metric: Metric | str = Metric.COSINE, ids=None) -> list[Neighbor]:
    """Exact top-k under ``q.filter`` by scanning every record.

    Rows are scored in chunks; rows failing the filter are skipped. Ties
    are broken by id. ``ids`` defaults to the row numbers.
    """
    metric = Metric.parse(metric)
    vectors = as_matrix(vectors)
    attrs = np.asarray(attrs)
    validate(q.filter, attrs.shape[1])
    n = vectors.shape[0]
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    qv = _query_vector(q, metric)
    best_d = np.empty(0, dtype=VECTOR_DTYPE)
    best_i = np.empty(0, dtype=np.int64)
    for start in range(0, n, _SCAN_CHUNK):
        stop = min(n, start + _SCAN_CHUNK)
        mask = eval_filter_block(q.filter, attrs[start:stop])
        if not mask.any():
            continue
        d = batch_distances(qv, vectors[start:stop][mask], metric)
        best_d = np.concatenate([best_d, d])
        best_i = np.concatenate([best_i, ids[start:stop][mask]])
        if best_d.size > q.k:
            keep = np.lexsort((best_i, best_d))[: q.k]
            best_d, best_i = best_d[keep], best_i[keep]
    order = np.lexsort((best_i, best_d))[: q.k]
    return [Neighbor(float(best_d[i]), int(best_i[i])) for i in order]


def exact_filtered_knn_partial(vectors, attrs, q: Query, metric: Metric | str = Metric.COSINE) -> list[Neighbor]:
    """Second, independently structured oracle: filter first, then partial sort.

    Used to cross-check :func:`exact_filtered_knn`.
    """
    metric = Metric.parse(metric)
    attrs = np.asarray(attrs)
    keep = np.flatnonzero(eval_filter_block(q.filter, attrs))
    if keep.size == 0:
        return []
    qv = _query_vector(q, metric).astype(np.float64)
    d = np.empty(keep.size, dtype=VECTOR_DTYPE)
    for i, row in enumerate(keep):
        x = np.asarray(vectors[row], dtype=VECTOR_DTYPE).astype(np.float64)
        if metric is Metric.EUCLIDEAN:
            diff = x - qv
            d[i] = np.sqrt(np.sum(diff * diff))
        else:
            d[i] = max(1.0 - np.sum(x * qv), 0.0)
    k = min(q.k, keep.size)
    if k < keep.size:
        cut = d[np.argpartition(d, k - 1)[k - 1]]
        cand = np.flatnonzero(d <= cut)
    else:
        cand = np.arange(keep.size)
    pairs = sorted(zip(d[cand].tolist(), keep[cand].tolist()))[:k]
    return [Neighbor(dist, rid) for dist, rid in pairs]


# -- synthetic data -----------------------------------------------------------

def synthetic_arrays(
    n: int, d: int, m: int, seed: int = 0, distribution: str = "gaussian", n_blobs: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm vectors plus uniform attributes in [-32768, 32767].

    ``gaussian`` draws isotropic directions; ``blobs`` draws points around
    ``n_blobs`` random centers (default ``sqrt(n)``) so that a cluster
    structure exists for recall studies.
    """
    if min(n, d, m) < 1:
        raise UsageError(f"n, d and m must all be >= 1 (got n={n}, d={d}, m={m})")
    rng = np.random.default_rng(seed)
    vectors = np.empty((n, d), dtype=VECTOR_DTYPE)
    if distribution == "gaussian":
        centers = None
    elif distribution == "blobs":
        nb = n_blobs or max(1, int(round(np.sqrt(n))))
        centers = rng.standard_normal((nb, d))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    else:
        raise UsageError(f"unknown distribution {distribution!r}; expected 'gaussian' or 'blobs'")
    step = 65536
    for start in range(0, n, step):
        rows = min(step, n - start)
        x = rng.standard_normal((rows, d))
        if centers is not None:
            x = centers[rng.integers(centers.shape[0], size=rows)] + 0.35 / np.sqrt(d) * x
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        # A zero draw has probability ~0; nudge rather than fail.
        norms[norms == 0] = 1.0
        vectors[start:start + rows] = x / norms
    attrs = rng.integers(ATTR_LOW, ATTR_HIGH, size=(n, m), endpoint=True, dtype=np.int64)
    return vectors, attrs


def gen_synthetic(
    n: int, d: int, m: int, seed: int, out_dir, distribution: str = "gaussian"
) -> tuple[Path, Path]:
    """Write a synthetic dataset as ``vectors.hvec`` and ``attrs.hatt`` under ``out_dir``."""
    vectors, attrs = synthetic_arrays(n, d, m, seed, distribution)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vpath, apath = out / "vectors.hvec", out / "attrs.hatt"
    storage.write_vectors(vpath, vectors)
    storage.write_attrs(apath, attrs)
    return vpath, apath


def random_filter(
    rng: np.random.Generator, m: int, selectivity: float
) -> FilterExpr:
    """A random filter whose expected selectivity on uniform attributes is ``selectivity``.

    Shapes rotate between a single range, a conjunction of two ranges, a
    disjunction of two ranges, and a range combined with an IN/NE term.
    """
    if not 0.0 < selectivity <= 1.0:
        raise UsageError("selectivity must be in (0, 1]")

    def rng_range(attr: int, frac: float) -> Predicate:
        width = max(1, int(round(frac * _ATTR_SPAN)))
        lo = int(rng.integers(ATTR_LOW, ATTR_HIGH - width + 2))
        return Predicate(attr, Op.BETWEEN, (lo, lo + width - 1))

    shape = int(rng.integers(4)) if m > 1 else 0
    attrs = rng.permutation(m)
    a, b = int(attrs[0]), int(attrs[-1])
    if shape == 0:
        return rng_range(a, selectivity)
    if shape == 1:
        s = float(np.sqrt(selectivity))
        return And(rng_range(a, s), rng_range(b, s))
    if shape == 2:
        # P(A or B) = 2s' - s'^2 for independent A, B with P = s'.
        s = 1.0 - float(np.sqrt(1.0 - selectivity))
        return Or(rng_range(a, s), rng_range(b, s))
    excluded = tuple(int(v) for v in rng.integers(ATTR_LOW, ATTR_HIGH, size=3))
    return And(rng_range(a, selectivity), Predicate(b, Op.NE, (excluded[0],)))


def make_queries(
    vectors,
    attrs,
    n_queries: int,
    seed: int,
    k: int = 10,
    probes: int = 7,
    selectivity: tuple[float, float] = (0.1, 0.6),
    jitter: float = 0.05,
) -> list[Query]:
    """Queries near random dataset points, with filters whose measured selectivity lies in ``selectivity``."""
    rng = np.random.default_rng(seed)
    vectors = as_matrix(vectors)
    attrs = np.asarray(attrs)
    lo, hi = selectivity
    queries = []
    while len(queries) < n_queries:
        base = np.asarray(vectors[int(rng.integers(vectors.shape[0]))], dtype=np.float64)
        v = base + jitter * rng.standard_normal(base.shape[0]) / np.sqrt(base.shape[0])
        target = float(rng.uniform(lo, hi))
        f = random_filter(rng, attrs.shape[1], target)
        sel = float(eval_filter_block(f, attrs).mean())
        if lo <= sel <= hi:
            queries.append(Query(v.astype(VECTOR_DTYPE), f, k, probes))
    return queries


# -- recall --------------------------------------------------------------------

@dataclass
class GroundTruth:
    rows: list[list[Neighbor]]
    survivors: list[int]
    n_records: int
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.seconds)) if self.seconds else float("nan")


def ground_truth(vectors, attrs, queries, metric: Metric | str = Metric.COSINE) -> GroundTruth:
    attrs = np.asarray(attrs)
    rows, survivors, secs = [], [], []
    for q in queries:
        t = time.perf_counter()
        rows.append(exact_filtered_knn(vectors, attrs, q, metric))
        secs.append(time.perf_counter() - t)
        survivors.append(int(eval_filter_block(q.filter, attrs).sum()))
    return GroundTruth(rows, survivors, int(attrs.shape[0]), secs)


def recall_at_k(returned, truth: list[Neighbor], k: int) -> float:
    """``|returned ∩ true top-k| / min(k, |truth|)``; 1.0 when nothing qualifies."""
    denom = min(k, len(truth))
    if denom == 0:
        return 1.0
    true_ids = {n.id for n in truth[:k]}
    got = {getattr(n, "id", n) for n in list(returned)[:k]}
    return len(true_ids & got) / denom


@dataclass
class ProbeRow:
    probes: int
    recalls: list[float]
    latencies: list[float]
    phase_means: dict[str, float]
    lists_loaded_max: int
    rows_read_mean: float

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recalls)) if self.recalls else float("nan")

    def to_json(self) -> dict:
        lat = np.asarray(self.latencies)
        return {
            "probes": self.probes,
            "mean_recall": self.mean_recall,
            "recall_per_query": self.recalls,
            "latency_p50": float(np.percentile(lat, 50)) if lat.size else None,
            "latency_p95": float(np.percentile(lat, 95)) if lat.size else None,
            "latency_mean": float(lat.mean()) if lat.size else None,
            "timings_mean": self.phase_means,
            "lists_loaded_max": self.lists_loaded_max,
            "vector_rows_read_mean": self.rows_read_mean,
        }


@dataclass
class RecallReport:
    k: int
    n_queries: int
    n_records: int
    selectivity: list[float]
    rows: list[ProbeRow]
    oracle_latency_mean: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def mean_selectivity(self) -> float:
        return float(np.mean(self.selectivity)) if self.selectivity else float("nan")

    def row(self, probes: int) -> ProbeRow:
        for r in self.rows:
            if r.probes == probes:
                return r
        raise KeyError(probes)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "n_queries": self.n_queries,
            "n_records": self.n_records,
            "selectivity_per_query": self.selectivity,
            "selectivity_mean": self.mean_selectivity,
            "oracle_latency_mean": self.oracle_latency_mean,
            "sweep": [r.to_json() for r in self.rows],
            "meta": self.meta,
        }

    def to_text(self) -> str:
        lines = [
            f"queries={self.n_queries}  k={self.k}  N={self.n_records}  "
            f"mean selectivity={self.mean_selectivity:.3f}",
            "",
            f"{'probes':>8} {'recall@' + str(self.k):>10} {'p50 s':>10} {'p95 s':>10} "
            f"{'lists max':>10} {'rows read':>10}",
        ]
        for r in self.rows:
            j = r.to_json()
            lines.append(
                f"{r.probes:>8d} {r.mean_recall:>10.4f} {j['latency_p50']:>10.5f} "
                f"{j['latency_p95']:>10.5f} {r.lists_loaded_max:>10d} {r.rows_read_mean:>10.1f}"
            )
        if self.oracle_latency_mean is not None:
            lines.append("")
            lines.append(f"brute-force oracle mean latency: {self.oracle_latency_mean:.5f} s")
        for r in self.rows:
            lines.append("")
            lines.append(f"Timing breakdown (mean over queries), probes={r.probes}")
            lines.append(timing_table(r.phase_means))
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, tpath = out / f"{stem}.json", out / f"{stem}.txt"
        jpath.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        tpath.write_text(self.to_text(), encoding="utf-8")
        return jpath, tpath


def timing_table(timings: dict[str, float]) -> str:
    """Aligned two-column table with exactly the four timing rows."""
    width = max(len(v) for v in TIMING_LABELS.values())
    lines = [f"{'Operation':<{width}}  {'Time, s':>10}"]
    for key, label in TIMING_LABELS.items():
        lines.append(f"{label:<{width}}  {timings[key]:>10.6f}")
    return "\n".join(lines)


def measure_recall(
    handle: HybridIndex,
    queries,
    truth: GroundTruth,
    probes_sweep,
    parallelism: int = 1,
) -> RecallReport:
    """Recall@k, latency and load statistics for each probe count in ``probes_sweep``."""
    queries = list(queries)
    if len(queries) != len(truth):
        raise UsageError(f"{len(queries)} queries but {len(truth)} ground-truth rows")
    if not queries:
        raise UsageError("no queries to measure")
    sweep = [int(p) for p in probes_sweep]
    if any(p < 1 for p in sweep):
        raise UsageError("probe counts must be >= 1")
    k = queries[0].k
    rows = []
    for p in sweep:
        batch = [Query(q.vector, q.filter, q.k, p) for q in queries]
        results = search_batch(handle, batch, parallelism)
        for r in results:
            if isinstance(r, Exception):
                raise r
        results: list[SearchResult]
        recalls = [recall_at_k(r.neighbors, t, q.k) for r, t, q in zip(results, truth.rows, queries)]
        phase_means = {
            key: float(np.mean([r.timings[key] for r in results])) for key in TIMING_LABELS
        }
        rows.append(
            ProbeRow(
                p,
                recalls,
                [r.timings["total"] for r in results],
                phase_means,
                max(r.load_stats.lists_loaded for r in results),
                float(np.mean([r.load_stats.vector_rows_read for r in results])),
            )
        )
    selectivity = [s / truth.n_records for s in truth.survivors]
    return RecallReport(
        k,
        len(queries),
        truth.n_records,
        selectivity,
        rows,
        truth.mean_latency if truth.seconds else None,
    )
