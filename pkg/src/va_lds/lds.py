"""Label distribution smoothing (LDS) and inverse-density loss weights.

The empirical label histogram over [-1, 1] is convolved with a symmetric
kernel to get an effective density; loss weights are the (clipped) inverse
of that density, rescaled to unit mean over the training labels.

Binning is half-open, ``[edge_b, edge_{b+1})``, with the last bin closed so
that a label of exactly 1.0 lands in bin ``B - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError

EPS = 1e-8
KERNEL_KINDS = ("gaussian", "triangular", "laplacian", "delta")


@dataclass(frozen=True)
class LabelHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class SmoothingKernel:
    kind: str = "gaussian"
    bandwidth: float = 0.02
    half_width: int = 5

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if not self.bandwidth > 0:
            raise ConfigError("kernel bandwidth must be > 0")
        if self.half_width < 0:
            raise ConfigError("kernel half_width must be >= 0")


@dataclass(frozen=True)
class DensityEstimate:
    bin_edges: np.ndarray
    density: np.ndarray


@dataclass(frozen=True)
class LDSParams:
    """Everything needed to turn training labels into a weight table."""

    n_bins: int = 200
    kernel: SmoothingKernel = field(default_factory=SmoothingKernel)
    clip_max: float = 50.0


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    return np.linspace(-1.0, 1.0, n_bins + 1)


def bin_index(edges: np.ndarray, labels) -> np.ndarray:
    """Bin index per label; raises on anything outside [-1, 1]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (not np.all(np.isfinite(labels))
                        or labels.min() < -1.0 or labels.max() > 1.0):
        raise ValidationError("labels must lie in [-1, 1] (filter -5 sentinels first)")
    idx = np.searchsorted(edges, labels, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def empirical_density(labels: Sequence[float], n_bins: int) -> LabelHistogram:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if labels.size == 0:
        raise ValidationError("cannot build a histogram from zero labels")
    edges = bin_edges(n_bins)
    idx = bin_index(edges, labels)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    return LabelHistogram(edges, counts)


def discretize_kernel(kernel: SmoothingKernel, bin_width: float) -> np.ndarray:
    """Kernel sampled at integer bin offsets ``-h..h``, normalized to sum 1.

    The delta kernel is always the single tap ``[1.0]``. The triangular
    window spans ``half_width + 1`` bins on each side and ignores bandwidth.
    """
    if kernel.kind == "delta":
        return np.array([1.0])
    h = kernel.half_width
    offsets = np.arange(-h, h + 1, dtype=np.float64)
    if kernel.kind == "gaussian":
        z = offsets * bin_width / kernel.bandwidth
        k = np.exp(-0.5 * z * z)
    elif kernel.kind == "laplacian":
        k = np.exp(-np.abs(offsets) * bin_width / kernel.bandwidth)
    else:
        k = 1.0 - np.abs(offsets) / (h + 1)
    k = k / k.sum()
    # exact symmetry regardless of summation order
    return 0.5 * (k + k[::-1])


def smoothing_matrix(n_bins: int, taps: np.ndarray) -> np.ndarray:
    """Column b spreads one unit of mass from bin b over in-range bins.

    Kernel mass that would fall outside [-1, 1] is dropped and the remainder
    renormalized per source bin, so the operator preserves total mass.
    """
    h = len(taps) // 2
    m = np.zeros((n_bins, n_bins))
    for off in range(-h, h + 1):
        m += taps[off + h] * np.eye(n_bins, k=-off)
    return m / m.sum(axis=0, keepdims=True)


def smooth_density(hist: LabelHistogram, kernel: SmoothingKernel) -> DensityEstimate:
    width = (hist.bin_edges[-1] - hist.bin_edges[0]) / hist.n_bins
    taps = discretize_kernel(kernel, width)
    m = smoothing_matrix(hist.n_bins, taps)
    return DensityEstimate(hist.bin_edges, m @ hist.counts.astype(np.float64))


@dataclass(frozen=True)
class WeightTable:
    bin_edges: np.ndarray
    weights: np.ndarray
    clip_max: float

    def weight_for(self, label: float) -> float:
        return weight_for(self, label)

    def lookup(self, labels) -> np.ndarray:
        """Vectorized :func:`weight_for`."""
        return self.weights[bin_index(self.bin_edges, labels)]

    def to_text(self) -> str:
        lines = ["bin_left\tbin_right\tweight"]
        for lo, hi, w in zip(self.bin_edges[:-1], self.bin_edges[1:], self.weights):
            lines.append(f"{lo:.6f}\t{hi:.6f}\t{float(w)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, clip_max: float = math.inf) -> "WeightTable":
        rows = [ln.split("\t") for ln in text.strip().splitlines()[1:]]
        lo = [float(r[0]) for r in rows]
        hi = float(rows[-1][1])
        return cls(np.array(lo + [hi]), np.array([float(r[2]) for r in rows]), clip_max)


def compute_weights(density: DensityEstimate, clip_max: float,
                    labels: Sequence[float]) -> WeightTable:
    """Inverse-density weights, clipped at ``clip_max``, unit mean over ``labels``.

    Weights are ``min(s / max(density, EPS), clip_max)`` with the scale ``s``
    chosen so the mean weight over the training labels is exactly one; this
    keeps every weight inside ``(0, clip_max]``, so ``clip_max`` must be >= 1
    (``math.inf`` disables clipping).
    """
    if not clip_max > 0:
        raise ConfigError("clip_max must be > 0")
    dens = np.asarray(density.density, dtype=np.float64)
    if not np.any(dens > 0):
        raise ValidationError("density has no mass")
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if labels.size == 0:
        raise ValidationError("no training labels to normalize weights over")
    raw = 1.0 / np.maximum(dens, EPS)
    n = np.bincount(bin_index(density.bin_edges, labels), minlength=len(dens))
    total = float(n.sum())

    if clip_max < 1.0 and not np.isinf(clip_max):
        raise ConfigError("clip_max below 1 cannot give unit mean weight")
    clipped = np.zeros(len(dens), dtype=bool)
    while True:
        free = (n > 0) & ~clipped
        free_mass = float(np.dot(n[free], raw[free]))
        if free_mass == 0.0:
            # every populated bin sits at the cap; only possible for clip_max == 1
            scale = math.inf
            break
        scale = (total - clip_max * n[clipped].sum()) / free_mass if clipped.any() \
            else total / free_mass
        now = (n > 0) & (scale * raw >= clip_max)
        if np.array_equal(now, clipped):
            break
        clipped = now
    weights = np.minimum(scale * raw, clip_max)
    return WeightTable(density.bin_edges, weights, clip_max)


def weight_for(table: WeightTable, label: float) -> float:
    if not -1.0 <= label <= 1.0:
        raise ValidationError(f"label {label} outside [-1, 1]; sentinels are never weighted")
    return float(table.weights[bin_index(table.bin_edges, [label])[0]])


def lds_weight_table(labels: Sequence[float], params: LDSParams) -> WeightTable:
    """Histogram, smooth and invert in one call (one target dimension)."""
    hist = empirical_density(labels, params.n_bins)
    return compute_weights(smooth_density(hist, params.kernel), params.clip_max, labels)


def uniform_table(n_bins: int) -> WeightTable:
    return WeightTable(bin_edges(n_bins), np.ones(n_bins), math.inf)
