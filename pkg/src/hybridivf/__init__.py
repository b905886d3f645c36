"""Disk-resident IVF-Flat similarity search with integrated attribute filtering."""

from .clustering import CentroidSet, KMeansMode, assign, default_k, train_kmeans
from .core import Metric, Neighbor, UsageError, batch_distances, distance, normalize
from .filters import (
    AttributeCodebook,
    FilterSyntaxError,
    FilterValidationError,
    encode_attributes,
    eval_filter,
    eval_filter_block,
    parse_filter,
    to_text,
)
from .index import HybridIndex, IndexFormatError, LoadStats, build_index, open_index
from .oracle import exact_filtered_knn, gen_synthetic, measure_recall
from .search import Query, SearchResult, nearest_centroids, search, search_batch

__version__ = "0.1.0"

__all__ = [
    "AttributeCodebook",
    "CentroidSet",
    "FilterSyntaxError",
    "FilterValidationError",
    "HybridIndex",
    "IndexFormatError",
    "KMeansMode",
    "LoadStats",
    "Metric",
    "Neighbor",
    "Query",
    "SearchResult",
    "UsageError",
    "assign",
    "batch_distances",
    "build_index",
    "default_k",
    "distance",
    "encode_attributes",
    "eval_filter",
    "eval_filter_block",
    "exact_filtered_knn",
    "gen_synthetic",
    "measure_recall",
    "nearest_centroids",
    "normalize",
    "open_index",
    "parse_filter",
    "search",
    "search_batch",
    "to_text",
    "train_kmeans",
]
