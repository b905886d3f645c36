"""K-means training (Lloyd and mini-batch) and nearest-centroid assignment."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    VECTOR_DTYPE,
    Metric,
    UsageError,
    as_matrix,
    batch_distances,
    squared_euclidean_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 1024
DEFAULT_MAX_ITERS = 100

# Assignment chunk: rows x K float64 scratch stays under ~64 MB at K=1000.
_ASSIGN_CHUNK = 8192
# Candidates within this relative margin of the best expansion-based distance
# are re-scored with the exact kernel before the argmin.
_REFINE_RTOL = 1e-6
_REFINE_ATOL = 1e-10


class KMeansMode(str, enum.Enum):
    LLOYD = "lloyd"
    MINIBATCH = "minibatch"

    @classmethod
    def parse(cls, value: "KMeansMode | str") -> "KMeansMode":
        if isinstance(value, KMeansMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UsageError(f"unknown k-means mode {value!r}") from None


@dataclass
class CentroidSet:
    centroids: np.ndarray
    metric: Metric
    trained_on: int
    # Lloyd only: inertia measured after each assignment step.
    inertia_history: list[float] = field(default_factory=list)
    reseeded: int = 0

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def default_k(n: int) -> int:
    """Centroid-count heuristic: ``n/1000`` up to a million vectors, ``sqrt(n)`` beyond.

    >>> default_k(500_000), default_k(10**9)
    (500, 31623)
    """
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    if n <= 1_000_000:
        k = max(1, round(n / 1000))
    else:
        k = round(math.sqrt(n))
    return min(k, n)


def _exact_argmin(x: np.ndarray, centroids: np.ndarray, metric: Metric, cand: np.ndarray) -> int:
    d = batch_distances(x, centroids[cand], metric)
    # argmin returns the first minimum; cand is ascending so ties go low.
    return int(cand[int(np.argmin(d))])


def _expansion_scores(chunk: np.ndarray, centroids: np.ndarray, metric: Metric) -> np.ndarray:
    if metric is Metric.EUCLIDEAN:
        return squared_euclidean_matrix(chunk, centroids)
    return 1.0 - chunk.astype(np.float64) @ centroids.astype(np.float64).T


def assign(data, cs: CentroidSet | np.ndarray, metric: Metric | str | None = None) -> np.ndarray:
    """Nearest-centroid cell for every row of ``data``; ties go to the lower index.

    The bulk of the work is a matrix product; rows whose best two scores are
    within rounding of each other are re-scored with the exact kernel so the
    answer agrees with a scalar argmin over :func:`~hybridivf.core.distance`.
    """
    if isinstance(cs, CentroidSet):
        centroids, metric = cs.centroids, cs.metric
    else:
        centroids = np.asarray(cs, dtype=VECTOR_DTYPE)
        metric = Metric.parse(metric or Metric.EUCLIDEAN)
    data = as_matrix(data)
    if data.shape[0] and data.shape[1] != centroids.shape[1]:
        raise UsageError(
            f"dimension mismatch: data has {data.shape[1]} columns, centroids {centroids.shape[1]}"
        )
    out = np.empty(data.shape[0], dtype=np.int64)
    # Expansion rounding error grows with the operand norms.
    if metric is Metric.EUCLIDEAN and data.shape[0]:
        c64 = centroids.astype(np.float64)
        scale = 1.0 + np.einsum("ij,ij->i", c64, c64).max() + _row_sq_norms(data)
    else:
        scale = np.ones(data.shape[0])
    for start in range(0, data.shape[0], _ASSIGN_CHUNK):
        chunk = data[start:start + _ASSIGN_CHUNK]
        scores = _expansion_scores(chunk, centroids, metric)
        best = np.argmin(scores, axis=1)
        best_val = scores[np.arange(len(best)), best]
        margin = _REFINE_ATOL * scale[start:start + len(chunk)] + _REFINE_RTOL * np.abs(best_val)
        near = scores <= (best_val + margin)[:, None]
        ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
        for r in ambiguous:
            best[r] = _exact_argmin(chunk[r], centroids, metric, np.flatnonzero(near[r]))
        out[start:start + len(chunk)] = best
    return out


def _row_sq_norms(data: np.ndarray) -> np.ndarray:
    out = np.empty(data.shape[0], dtype=np.float64)
    for start in range(0, data.shape[0], _ASSIGN_CHUNK):
        chunk = data[start:start + _ASSIGN_CHUNK].astype(np.float64)
        out[start:start + len(chunk)] = np.einsum("ij,ij->i", chunk, chunk)
    return out


def _sq_dist_to_assigned(data: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.empty(data.shape[0], dtype=np.float64)
    for start in range(0, data.shape[0], _ASSIGN_CHUNK):
        chunk = data[start:start + _ASSIGN_CHUNK].astype(np.float64)
        diff = chunk - centroids[labels[start:start + _ASSIGN_CHUNK]].astype(np.float64)
        out[start:start + len(chunk)] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    x = data.astype(np.float64)
    centers = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = squared_euclidean_matrix(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # Fewer distinct points than k; fall back to uniform picks.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[i] = x[idx]
        np.minimum(closest, squared_euclidean_matrix(x, centers[i:i + 1])[:, 0], out=closest)
    return centers


def _renormalize(centers: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(centers, axis=1)
    ok = norms > 0
    centers[ok] /= norms[ok, None]
    return centers


def _repair_empty(
    data: np.ndarray, centers: np.ndarray, labels: np.ndarray, metric: Metric
) -> int:
    """Re-seed empty clusters at the points farthest from their centroids, in place."""
    counts = np.bincount(labels, minlength=centers.shape[0])
    empty = np.flatnonzero(counts == 0)
    if not empty.size:
        return 0
    far = _sq_dist_to_assigned(data, centers, labels)
    # Stable descending order so the choice is deterministic on ties.
    order = np.argsort(-far, kind="stable")
    used = 0
    for cell in empty:
        while used < len(order) and counts[labels[order[used]]] <= 1:
            used += 1
        if used >= len(order):
            break
        donor = order[used]
        used += 1
        counts[labels[donor]] -= 1
        labels[donor] = cell
        counts[cell] = 1
        centers[cell] = data[donor]
    if metric is Metric.COSINE:
        _renormalize(centers)
    return int(empty.size)


def _lloyd(data, centers, metric, max_iters, cs_history):
    x = data
    labels = assign(x, centers.astype(VECTOR_DTYPE), metric)
    reseeded = 0
    for it in range(max_iters):
        cs_history.append(float(_sq_dist_to_assigned(x, centers, labels).sum()))
        new_centers = np.zeros_like(centers)
        np.add.at(new_centers, labels, x.astype(np.float64))
        counts = np.bincount(labels, minlength=centers.shape[0]).astype(np.float64)
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        new_centers[~nonempty] = centers[~nonempty]
        if metric is Metric.COSINE:
            _renormalize(new_centers)
        # Stay on the float32 grid so assignment and inertia see the same centers.
        centers = new_centers.astype(VECTOR_DTYPE).astype(np.float64)
        reseeded += _repair_empty(x, centers, labels, metric)
        new_labels = assign(x, centers.astype(VECTOR_DTYPE), metric)
        changed = int(np.count_nonzero(new_labels != labels))
        labels = new_labels
        logger.debug("lloyd iter %d: inertia=%.6g changed=%d", it, cs_history[-1], changed)
        if changed == 0:
            break
    cs_history.append(float(_sq_dist_to_assigned(x, centers, labels).sum()))
    return centers, labels, reseeded


def _minibatch(data, centers, metric, max_iters, batch_size, rng):
    n = data.shape[0]
    counts = np.zeros(centers.shape[0], dtype=np.float64)
    for it in range(max_iters):
        idx = rng.choice(n, size=min(batch_size, n), replace=False) if batch_size < n else np.arange(n)
        batch = data[idx].astype(np.float64)
        labels = assign(batch.astype(VECTOR_DTYPE), centers.astype(VECTOR_DTYPE), metric)
        # Per-center learning rate 1/count, applied point by point in batch order.
        for x, c in zip(batch, labels):
            counts[c] += 1.0
            centers[c] += (x - centers[c]) / counts[c]
        if metric is Metric.COSINE:
            _renormalize(centers)
    return centers


def train_kmeans(
    data,
    k: int,
    mode: KMeansMode | str = KMeansMode.LLOYD,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    metric: Metric | str = Metric.EUCLIDEAN,
) -> CentroidSet:
    """Train ``k`` centroids with k-means++ seeding.

    Under ``COSINE`` the input rows must already be unit-norm; centroids are
    renormalized after each update (spherical k-means). After training every
    centroid owns at least one training row: empty cells are re-seeded from
    the point farthest from its current centroid.
    """
    mode = KMeansMode.parse(mode)
    metric = Metric.parse(metric)
    data = as_matrix(data)
    n = data.shape[0]
    if n == 0:
        raise UsageError("cannot train k-means on empty data")
    if k < 1 or k > n:
        raise UsageError(f"k must be in [1, {n}], got {k}")
    if max_iters < 1 or batch_size < 1:
        raise UsageError("max_iters and batch_size must be >= 1")
    if not np.all(np.isfinite(data)):
        raise UsageError("training data contains NaN or Inf")

    rng = np.random.default_rng(seed)
    history: list[float] = []
    if mode is KMeansMode.LLOYD:
        centers = _kmeans_pp(data, k, rng)
        if metric is Metric.COSINE:
            _renormalize(centers)
        centers = centers.astype(VECTOR_DTYPE).astype(np.float64)
        centers, labels, reseeded = _lloyd(data, centers, metric, max_iters, history)
    else:
        init_n = min(n, max(3 * batch_size, 3 * k))
        init_idx = np.sort(rng.choice(n, size=init_n, replace=False))
        centers = _kmeans_pp(data[init_idx], k, rng)
        if metric is Metric.COSINE:
            _renormalize(centers)
        centers = _minibatch(data, centers, metric, max_iters, batch_size, rng)
        reseeded = 0
        labels = assign(data, centers.astype(VECTOR_DTYPE), metric)
    # Repair until every cell owns a row; each pass fixes at least one cell.
    for _ in range(k):
        fixed = _repair_empty(data, centers, labels, metric)
        if not fixed:
            break
        reseeded += fixed
        labels = assign(data, centers.astype(VECTOR_DTYPE), metric)
    centroids = centers.astype(VECTOR_DTYPE)
    if not np.all(np.isfinite(centroids)):
        raise RuntimeError("k-means produced non-finite centroids")
    return CentroidSet(centroids, metric, n, history, reseeded)


def inertia(data, cs: CentroidSet) -> float:
    """Sum of squared L2 distances from each row to its assigned centroid."""
    data = as_matrix(data, cs.dim)
    labels = assign(data, cs)
    return float(_sq_dist_to_assigned(data, cs.centroids.astype(np.float64), labels).sum())
