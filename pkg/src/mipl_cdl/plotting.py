"""Figures written next to the CSV/JSON outputs.

Figures are conveniences derived from the exported data; SVG output is
byte-stable (fixed hash salt, no date metadata) so replays hash equal.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mipl_cdl.calibration import ReliabilityReport  # noqa: E402

STYLE = {
    "svg.hashsalt": "mipl-cdl",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    tmp.replace(path)
    return path


def reliability_diagram(report: ReliabilityReport, path, title: str | None = None) -> Path:
    """Per-bin accuracy bars against the diagonal, with the gap shaded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        edges = report.edges
        width = np.diff(edges)
        filled = report.counts > 0
        ax.bar(edges[:-1][filled], report.accuracy[filled], width=width[filled], align="edge",
               color="#4C72B0", edgecolor="black", linewidth=0.5, label="accuracy")
        gap_lo = np.minimum(report.accuracy, report.confidence)[filled]
        gap_hi = np.maximum(report.accuracy, report.confidence)[filled]
        ax.bar(edges[:-1][filled], gap_hi - gap_lo, bottom=gap_lo, width=width[filled], align="edge",
               color="#DD8452", alpha=0.45, edgecolor="#DD8452", linewidth=0.5, label="gap")
        ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=1)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        ax.set_title(title or f"ECE = {report.ece:.4f}")
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def loss_trace(losses, path, tau=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        epochs = np.arange(1, len(losses) + 1)
        ax.plot(epochs, losses, color="#4C72B0", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        if tau is not None and len(set(tau)) > 1:
            twin = ax.twinx()
            twin.plot(epochs, tau, color="#C44E52", lw=1, ls=":")
            twin.set_ylabel("temperature")
        fig.tight_layout()
        return _save(fig, path)


def compare_figure(ece_a, ece_b, labels, path) -> Path:
    """Paired per-seed ECE of two arms; lines join runs sharing a seed."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ece_a, ece_b = np.asarray(ece_a), np.asarray(ece_b)
        for a, b in zip(ece_a, ece_b):
            ax.plot([0, 1], [a, b], color="grey", lw=0.6)
        ax.scatter(np.zeros_like(ece_a), ece_a, color="#4C72B0", zorder=3)
        ax.scatter(np.ones_like(ece_b), ece_b, color="#DD8452", zorder=3)
        ax.set_xticks([0, 1], labels)
        ax.set_xlim(-0.4, 1.4)
        ax.set_ylabel("ECE")
        fig.tight_layout()
        return _save(fig, path)
