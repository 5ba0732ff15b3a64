"""Static figures: label density before/after smoothing, and the 2D VA histogram."""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptySequenceError  # noqa: E402
from .lds import DensityEstimate, LabelHistogram  # noqa: E402


def va_histogram(labels: np.ndarray, n_cells: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Counts over an ``n_cells`` x ``n_cells`` grid on [-1, 1]^2, sentinel rows dropped.

    Returns ``(counts, edges)`` with ``counts[i, j]`` for valence cell i and
    arousal cell j.
    """
    labels = np.asarray(labels, dtype=float).reshape(-1, 2)
    keep = np.all((labels >= -1) & (labels <= 1), axis=1)
    labels = labels[keep]
    if len(labels) == 0:
        raise EmptySequenceError("no annotated frames to histogram")
    edges = np.linspace(-1.0, 1.0, n_cells + 1)
    counts, _, _ = np.histogram2d(labels[:, 0], labels[:, 1], bins=[edges, edges])
    return counts.astype(np.int64), edges


def cell_ratio(counts: np.ndarray) -> float:
    """max/min cell count; inf when some cell is empty."""
    lo = counts.min()
    return float("inf") if lo == 0 else float(counts.max() / lo)


def plot_va_histogram(labels: np.ndarray, path: Path, n_cells: int = 20, title: str = "") -> Path:
    counts, edges = va_histogram(labels, n_cells)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    # log scale; empty cells shown as the floor colour
    img = ax.pcolormesh(edges, edges, np.log10(counts.T + 1.0), cmap="viridis")
    fig.colorbar(img, ax=ax, label="log10(count + 1)")
    ax.set_xlabel("valence")
    ax.set_ylabel("arousal")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_density(hist: LabelHistogram, smoothed: DensityEstimate, path: Path,
                 target: str = "") -> Path:
    """Empirical label density and its smoothed version on one axis."""
    edges = hist.bin_edges
    centres = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(centres, hist.counts, width=width, color="0.75", label="empirical")
    ax.plot(centres, smoothed.density, color="C3", lw=1.5, label="LDS smoothed")
    ax.set_xlim(-1, 1)
    ax.set_xlabel(target or "label")
    ax.set_ylabel("frames per bin")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
