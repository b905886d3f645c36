"""Figures for benchmark reports, written next to the JSON/text output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from .oracle import RecallReport  # noqa: E402
from .search import TIMING_LABELS  # noqa: E402

_PHASES = ("centroid_search", "filtering", "detailed_search")


def _figure(width: float = 6.0, ratio: float = 0.62) -> Figure:
    # Figure objects (not pyplot) keep rendering thread-safe and leak-free.
    fig = Figure(figsize=(width, width * ratio))
    fig.set_layout_engine("tight")
    return fig


def recall_figure(report: RecallReport) -> Figure:
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    probes = [r.probes for r in report.rows]
    ax.plot(probes, [r.mean_recall for r in report.rows], "o-", color="C0", label=f"recall@{report.k}")
    ax.set_xscale("log")
    ax.set_xlabel("probes (lists scanned)")
    ax.set_ylabel(f"mean recall@{report.k}")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, which="both", alpha=0.3)

    lat = ax.twinx()
    lat.plot(probes, [r.to_json()["latency_mean"] * 1e3 for r in report.rows], "s--", color="C1", label="mean latency")
    if report.oracle_latency_mean is not None:
        lat.axhline(report.oracle_latency_mean * 1e3, color="C3", ls=":", label="brute force")
    lat.set_ylabel("latency (ms)")

    handles = ax.get_legend_handles_labels()
    extra = lat.get_legend_handles_labels()
    ax.legend(handles[0] + extra[0], handles[1] + extra[1], loc="lower right", fontsize=8)
    ax.set_title(f"N={report.n_records}, {report.n_queries} queries, selectivity {report.mean_selectivity:.2f}")
    return fig


def timing_figure(report: RecallReport) -> Figure:
    """Stacked per-phase mean times for each probe count; the marker is the measured total."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    labels = [str(r.probes) for r in report.rows]
    bottom = [0.0] * len(report.rows)
    for i, key in enumerate(_PHASES):
        vals = [r.phase_means[key] * 1e3 for r in report.rows]
        ax.bar(labels, vals, bottom=bottom, color=f"C{i}", label=TIMING_LABELS[key])
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.plot(labels, [r.phase_means["total"] * 1e3 for r in report.rows], "k_", ms=18, mew=2,
            label=TIMING_LABELS["total"])
    ax.set_xlabel("probes")
    ax.set_ylabel("mean time per query (ms)")
    ax.legend(fontsize=8)
    return fig


def save_report_figures(report: RecallReport, out_dir, fmt: str = "png", dpi: int = 120) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fig in (("recall", recall_figure(report)), ("timings", timing_figure(report))):
        path = out / f"{name}.{fmt}"
        fig.savefig(path, dpi=dpi)
        paths.append(path)
    return paths
