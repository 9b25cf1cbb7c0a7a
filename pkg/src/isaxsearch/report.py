"""Run reports as tab-delimited ``key=value`` records, plus matplotlib figures."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def format_record(kind: str, **fields) -> str:
    parts = [f"record={kind}"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.9g}"
        parts.append(f"{key}={value}")
    return "\t".join(parts)


def parse_record(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.rstrip("\n").split("\t"))


def latency_summary(latencies) -> dict[str, float]:
    lat = np.asarray(latencies, dtype=np.float64)
    if lat.size == 0:
        return {"mean_s": math.nan, "median_s": math.nan, "p95_s": math.nan}
    return {
        "mean_s": float(lat.mean()),
        "median_s": float(np.median(lat)),
        "p95_s": float(np.percentile(lat, 95)),
    }


def figure_paths(report_path) -> dict[str, Path]:
    p = Path(report_path)
    stem = p.with_suffix("")
    return {
        "latency": stem.with_name(stem.name + "_latency.png"),
        "phases": stem.with_name(stem.name + "_phases.png"),
    }


def render_figures(report_path, engine: str, rows: list[dict]) -> dict[str, Path]:
    """Per-query latency and phase breakdown figures written next to ``report_path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = figure_paths(report_path)
    lat_ms = np.array([r["latency_s"] for r in rows]) * 1e3

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax0.plot(np.arange(len(lat_ms)), lat_ms, marker=".", lw=0.8)
    ax0.set_xlabel("query")
    ax0.set_ylabel("latency (ms)")
    ax0.set_title(f"{engine} engine")
    ax1.hist(lat_ms, bins=min(30, max(5, len(lat_ms) // 3)))
    ax1.set_xlabel("latency (ms)")
    ax1.set_ylabel("queries")
    fig.tight_layout()
    fig.savefig(paths["latency"], dpi=120)
    plt.close(fig)

    phases = list(rows[0]["timings"]) if rows else []
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bottom = np.zeros(len(rows))
    for name in phases:
        vals = np.array([r["timings"][name] for r in rows]) * 1e3
        ax.bar(np.arange(len(rows)), vals, bottom=bottom, label=name, width=1.0)
        bottom += vals
    ax.set_xlabel("query")
    ax.set_ylabel("time (ms)")
    if phases:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["phases"], dpi=120)
    plt.close(fig)
    return paths
