"""Static figures: per-document score histograms and decoder attention heatmaps."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .decoder import AttentionTrace  # noqa: E402
from .metrics import ScoreReport  # noqa: E402


def score_histogram(report: ScoreReport, path: str | Path, bins: int = 20) -> Path:
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    for ax, key, title in ((axes[0], "teds", "TEDS"), (axes[1], "pair_f1", "pair F1")):
        values = [getattr(s, key) for s in report.documents]
        ax.hist(values, bins=bins, range=(0, 1), color="0.35")
        ax.set_xlabel(title)
        ax.axvline(float(np.mean(values)) if values else 0.0, color="C3", lw=1)
    axes[0].set_ylabel("documents")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def attention_heatmap(trace: AttentionTrace, labels: Sequence[str], path: str | Path,
                      title: Optional[str] = None) -> Path:
    """Rows are decoding steps, columns are candidates (root first); selections are boxed."""
    path = Path(path)
    n = len(trace.selections)
    grid = np.full((n, n + 1), np.nan)
    for s, energies in enumerate(trace.energies):
        e = np.asarray(energies, dtype=float)
        e = np.exp(e - e.max())
        grid[s, : len(e)] = e / e.sum()
    short = ["<root>"] + [lab[:24] for lab in labels]
    size = max(3.0, 0.35 * (n + 2))
    fig, ax = plt.subplots(figsize=(size + 1.5, size))
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=1, aspect="auto")
    for s, sel in enumerate(trace.selections):
        ax.add_patch(plt.Rectangle((sel - 0.5, s - 0.5), 1, 1, fill=False, ec="r", lw=1.2))
    ax.set_xticks(range(n + 1), short[: n + 1], rotation=90, fontsize=7)
    ax.set_yticks(range(n), short[1: n + 1], fontsize=7)
    ax.set_xlabel("reference candidate")
    ax.set_ylabel("heading")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.04, label="softmax(energy)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
