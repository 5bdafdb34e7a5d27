"""Report figures rendered to PNG files (Agg backend, no timestamps in metadata)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(curves: dict, path, title: str = "", ylabel: str = "loss") -> Path:
    """Line plot of named series on a log scale; ``curves`` maps label -> sequence."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in curves.items():
        ys = [y for y in ys]
        if ys:
            ax.plot(range(1, len(ys) + 1), ys, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_pdp(pred, label, path, title: str = "") -> Path:
    """Power-delay profile of one Tx–Rx pair, predicted against label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for cir, fmt, name in ((label, "C0o", "label"), (pred, "C1x", "predicted")):
        if cir is None or not cir.mpcs:
            continue
        tau = [m.tau * 1e9 for m in cir.mpcs]
        p = [20.0 * math.log10(abs(m.a)) for m in cir.mpcs]
        ax.vlines(tau, min(p) - 10.0, p, colors=fmt[:2], alpha=0.4)
        ax.plot(tau, p, fmt, label=name)
    ax.set_xlabel("delay (ns)")
    ax.set_ylabel("path gain (dB)")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_delay_scatter(report, path) -> Path:
    """Predicted against label average delay per Tx–Rx pair."""
    xs = [d.avg_delay_label_ns for d in report.details if not math.isnan(d.avg_delay_pred_ns)]
    ys = [d.avg_delay_pred_ns for d in report.details if not math.isnan(d.avg_delay_pred_ns)]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(xs, ys, "C0.", ms=4)
    if xs:
        lo, hi = min(xs + ys), max(xs + ys)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("label average delay (ns)")
    ax.set_ylabel("predicted average delay (ns)")
    ax.set_title(f"avg delay MAE {report.avg_delay_error_ns:.3f} ns")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Bar chart of wall-clock times per benchmark layout."""
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [r["layout"] for r in rows]
    ax.bar(names, [r["seconds"] for r in rows], color=["C0", "C1", "C2", "C3"][: len(rows)])
    ax.set_ylabel("wall-clock time (s)")
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)
