"""Command-line interface: ``hybridivf {gen,build,search,add,bench}``.

Exit codes: 0 success, 2 usage/validation error, 1 I/O or environment error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import storage
from .clustering import DEFAULT_BATCH_SIZE, DEFAULT_MAX_ITERS, default_k
from .core import UsageError
from .index import build_index, open_index
from .oracle import gen_synthetic, ground_truth, make_queries, measure_recall
from .search import DEFAULT_PROBES, Query, search, search_escalating

logger = logging.getLogger("hybridivf")

THREADS_ENV = "HYBRIDIVF_THREADS"


def default_parallelism() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise UsageError(f"{THREADS_ENV} must be >= 1")
        return value
    return os.cpu_count() or 1


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _k_arg(text: str):
    return "auto" if text == "auto" else _positive_int(text)


def _floats(text: str) -> list[float]:
    if text.startswith("@"):
        return [float(x) for x in json.loads(Path(text[1:]).read_text())]
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"could not parse vector {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"could not parse integer list {text!r}") from None


def _emit(args, doc: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(doc, indent=None if args.command == "search" else 2))
    else:
        print(text)


def _require_index(args) -> Path:
    if not args.index:
        raise UsageError("--index DIR is required")
    return Path(args.index)


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    vpath, apath = gen_synthetic(args.n, args.d, args.m, args.seed, args.out, args.distribution)
    doc = {
        "vectors": str(vpath),
        "attrs": str(apath),
        "sha256": {"vectors": storage.sha256_file(vpath), "attrs": storage.sha256_file(apath)},
    }
    text = "\n".join(f"{p}  sha256={doc['sha256'][k]}" for k, p in (("vectors", vpath), ("attrs", apath)))
    _emit(args, doc, text)
    return 0


def cmd_build(args) -> int:
    out = _require_index(args)
    vectors = storage.read_vectors(args.vectors)
    attrs = storage.read_attrs(args.attrs)
    k = None if args.k == "auto" else args.k
    if k is None:
        logger.info("K=auto -> %d for N=%d", default_k(vectors.shape[0]), vectors.shape[0])
    manifest = build_index(
        vectors,
        attrs,
        out,
        metric=args.metric,
        k=k,
        kmeans_mode=args.kmeans,
        seed=args.seed,
        max_iters=args.max_iters,
        batch_size=args.batch_size,
        train_size=args.train_size,
        overwrite=args.force,
    )
    for phase, secs in manifest.build_timings.items():
        logger.info("build %-7s %.3fs", phase, secs)
    doc = {
        "index": str(out),
        "K": manifest.n_lists,
        "N": manifest.n_records,
        "D": manifest.dim,
        "M": manifest.n_attrs,
        "metric": manifest.metric.value,
        "centroids_sha256": storage.sha256_file(out / "centroids.bin"),
        "build_seconds": manifest.build_timings,
    }
    _emit(args, doc, f"built {out}: K={manifest.n_lists} N={manifest.n_records} "
                     f"D={manifest.dim} M={manifest.n_attrs} metric={manifest.metric.value}")
    return 0


def _query_from_args(args, n_attrs: int) -> Query:
    if args.query:
        raw = sys.stdin.read() if args.query == "-" else Path(args.query).read_text(encoding="utf-8")
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise UsageError(f"query is not valid JSON: {exc}") from None
    else:
        if args.vector is None:
            raise UsageError("give --vector or --query")
        doc = {"vector": _floats(args.vector)}
    # Flags override fields from the query file.
    if args.filter is not None:
        doc["filter"] = args.filter
    if args.k is not None:
        doc["k"] = args.k
    if args.probes is not None:
        doc["probes"] = args.probes
    doc.setdefault("probes", DEFAULT_PROBES)
    return Query.from_json(doc, n_attrs)


def cmd_search(args) -> int:
    handle = open_index(_require_index(args), cache_capacity=args.cache)
    q = _query_from_args(args, handle.n_attrs)
    res = search_escalating(handle, q) if args.escalate else search(handle, q)
    doc = res.to_json(include_stats=args.stats)
    print(json.dumps(doc))
    return 0


def cmd_add(args) -> int:
    handle = open_index(_require_index(args), writable=True)
    attrs = np.asarray(_ints(args.attrs), dtype=np.int64)
    rid, cell = handle.add_vector(_floats(args.vector), attrs)
    if args.flush:
        handle.flush()
    _emit(args, {"id": rid, "cell": cell}, f"id={rid} cell={cell}")
    return 0


def _parse_sweep(text: str, k: int) -> list[int]:
    out = []
    for tok in text.replace(",", " ").split():
        value = k if tok.upper() == "K" else int(tok)
        if value < 1:
            raise UsageError("probe counts must be >= 1")
        out.append(min(value, k))
    return sorted(set(out))


def cmd_bench(args) -> int:
    from .plots import save_report_figures

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    vpath, apath = gen_synthetic(args.n, args.d, args.m, args.seed, out / "data", args.distribution)
    vectors = storage.read_vectors(vpath, mmap=False)
    attrs = storage.read_attrs(apath, mmap=False)
    index_dir = Path(args.index) if args.index else out / "index"
    k = None if args.k == "auto" else args.k
    manifest = build_index(
        vectors, attrs, index_dir, metric=args.metric, k=k, kmeans_mode=args.kmeans,
        seed=args.seed, max_iters=args.max_iters, batch_size=args.batch_size,
        train_size=args.train_size, overwrite=True,
    )
    logger.info("bench: built K=%d in %.2fs", manifest.n_lists, manifest.build_timings["total"])
    lo, hi = (float(x) for x in args.selectivity.split(","))
    queries = make_queries(vectors, attrs, args.queries, args.seed + 1, k=args.topk,
                           selectivity=(lo, hi))
    truth = ground_truth(vectors, attrs, queries, manifest.metric)
    handle = open_index(index_dir, cache_capacity=args.cache)
    sweep = _parse_sweep(args.probes_sweep, manifest.n_lists)
    t = time.perf_counter()
    report = measure_recall(handle, queries, truth, sweep, parallelism=args.parallelism)
    wall = time.perf_counter() - t
    report.meta = {
        "seed": args.seed,
        "distribution": args.distribution,
        "metric": manifest.metric.value,
        "K": manifest.n_lists,
        "D": manifest.dim,
        "M": manifest.n_attrs,
        "parallelism": args.parallelism,
        "sweep_wall_seconds": {str(args.parallelism): wall},
        "build_seconds": manifest.build_timings,
    }
    if args.compare_parallelism and args.parallelism != 1:
        t = time.perf_counter()
        serial = measure_recall(handle, queries, truth, sweep, parallelism=1)
        report.meta["sweep_wall_seconds"]["1"] = time.perf_counter() - t
        report.meta["recall_identical_across_parallelism"] = all(
            a.recalls == b.recalls for a, b in zip(report.rows, serial.rows)
        )
    jpath, tpath = report.save(out)
    figures = [] if args.no_figures else save_report_figures(report, out)
    logger.info("bench finished in %.1fs", time.perf_counter() - t0)
    doc = {"report_json": str(jpath), "report_text": str(tpath), "figures": [str(p) for p in figures],
           "report": report.to_json()}
    _emit(args, doc, report.to_text() + "\n" + "\n".join(
        f"wrote {p}" for p in [jpath, tpath, *figures]))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the same flag appear before or after the subcommand.
    common.add_argument("--index", metavar="DIR", default=argparse.SUPPRESS, help="index directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--parallelism", type=_positive_int, default=argparse.SUPPRESS,
                        help=f"worker threads (default: ${THREADS_ENV} or CPU count)")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="hybridivf", parents=[common],
                                description="Filtered IVF-Flat similarity search on disk.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--d", type=_positive_int, required=True)
    g.add_argument("--m", type=_positive_int, required=True)
    g.add_argument("--distribution", choices=["gaussian", "blobs"], default="gaussian")
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_gen)

    def index_build_flags(sp):
        sp.add_argument("--k", type=_k_arg, default="auto", help="centroid count or 'auto'")
        sp.add_argument("--metric", choices=["cosine", "euclidean"], default="cosine")
        sp.add_argument("--kmeans", choices=["lloyd", "minibatch"], default="lloyd")
        sp.add_argument("--max-iters", type=_positive_int, default=DEFAULT_MAX_ITERS)
        sp.add_argument("--batch-size", type=_positive_int, default=DEFAULT_BATCH_SIZE)
        sp.add_argument("--train-size", type=_positive_int, default=None,
                        help="train k-means on this many sampled rows")

    b = sub.add_parser("build", parents=[common], help="build an index from HVEC/HATT files")
    b.add_argument("--vectors", required=True)
    b.add_argument("--attrs", required=True)
    index_build_flags(b)
    b.add_argument("--force", action="store_true", help="replace an existing index")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("search", parents=[common], help="run one query")
    s.add_argument("--query", help="query JSON file ('-' for stdin)")
    s.add_argument("--vector", help="comma-separated floats or @file.json")
    s.add_argument("--filter")
    s.add_argument("--k", type=_positive_int)
    s.add_argument("--probes", type=_positive_int, help=f"lists to probe (default {DEFAULT_PROBES})")
    s.add_argument("--escalate", action="store_true",
                   help="double probes until k results are found")
    s.add_argument("--stats", action="store_true", help="include load statistics")
    s.add_argument("--cache", type=int, default=0, help="LRU capacity in vector blocks")
    s.set_defaults(func=cmd_search)

    a = sub.add_parser("add", parents=[common], help="insert one record")
    a.add_argument("--vector", required=True)
    a.add_argument("--attrs", required=True, help="comma-separated integers")
    a.add_argument("--flush", action="store_true", help="compact segments afterwards")
    a.set_defaults(func=cmd_add)

    r = sub.add_parser("bench", parents=[common], help="gen, build, ground truth and probe sweep")
    r.add_argument("--n", type=_positive_int, default=20000)
    r.add_argument("--d", type=_positive_int, default=64)
    r.add_argument("--m", type=_positive_int, default=4)
    r.add_argument("--distribution", choices=["gaussian", "blobs"], default="blobs")
    index_build_flags(r)
    r.add_argument("--queries", type=_positive_int, default=50)
    r.add_argument("--topk", type=_positive_int, default=10)
    r.add_argument("--probes-sweep", default="1,3,7,15,K", help="comma list; 'K' means all lists")
    r.add_argument("--selectivity", default="0.1,0.6", help="lo,hi filter selectivity")
    r.add_argument("--cache", type=int, default=0)
    r.add_argument("--out", default="bench_out")
    r.add_argument("--compare-parallelism", action="store_true",
                   help="also rerun the sweep serially and record both wall times")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("index", None), ("seed", 0), ("json", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if not hasattr(args, "parallelism"):
            args.parallelism = default_parallelism()
        return args.func(args)
    except ValueError as exc:  # UsageError and friends
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
