"""Matplotlib helpers for report figures (file output only, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STAGE_COLORS = {"retrieval": "#1f77b4", "reranking": "#ff7f0e", "generation": "#2ca02c"}

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "stagevis",
}


def new_figure(width: float = 6.4, height: float = 3.6):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_STYLE):
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def grouped_bars(
    labels: Sequence[str],
    series: dict[str, Sequence[float | None]],
    ylabel: str,
    title: str = "",
    colors: dict[str, str] | None = None,
    zero_line: bool = True,
):
    """One bar group per label, one bar per series; None values are left blank."""
    fig, ax = new_figure(max(4.0, 0.9 * len(labels) + 2.5))
    n = max(1, len(series))
    width = 0.8 / n
    x = np.arange(len(labels))
    for i, (name, values) in enumerate(series.items()):
        vals = [np.nan if v is None else v for v in values]
        ax.bar(x + (i - (n - 1) / 2) * width, vals, width, label=name, color=(colors or {}).get(name))
    if zero_line:
        ax.axhline(0, color="0.3", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return fig, ax


def heatmap(rows: Sequence[str], cols: Sequence[str], values: Sequence[Sequence[float | None]], label: str, title: str = ""):
    data = np.array([[np.nan if v is None else v for v in row] for row in values], dtype=float)
    fig, ax = new_figure(max(4.0, 0.7 * len(cols) + 2.5), max(2.5, 0.4 * len(rows) + 1.5))
    finite = data[np.isfinite(data)]
    lim = float(np.max(np.abs(finite))) if finite.size else 1.0
    im = ax.imshow(data, cmap="RdBu", vmin=-lim or -1, vmax=lim or 1, aspect="auto")
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=30, ha="right")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows)
    for (i, j), v in np.ndenumerate(data):
        if np.isfinite(v):
            ax.text(j, i, f"{v:+.0%}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax, label=label)
    if title:
        ax.set_title(title)
    return fig, ax
