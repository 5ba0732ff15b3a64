"""Local phase from an oriented quadrature filter bank, and phase differences.

Filters are log-Gabor radial profiles times a ``cos^(O-1)`` angular window
restricted to a half plane, so each filter is analytic and its response
carries a well defined local phase. The passband sits on the half plane
opposite the nominal orientation: content translating *along* the
orientation then produces a positive phase advance.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ValidationError

RADIAL_SIGMA = 0.55  # log-Gabor bandwidth ratio (sigma / f0), about 1.7 octaves
BASE_WAVELENGTH = 4.0


def wrap(x):
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x), 2 * np.pi)


def to_gray(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame[..., :3] @ np.array([0.299, 0.587, 0.114])
    return frame


@dataclass(frozen=True, eq=False)
class FilterBank:
    n_scales: int
    n_orientations: int
    image_size: int
    filters: np.ndarray  # (S, O, N, N) complex, frequency domain
    center_wavelengths: tuple

    @property
    def orientations(self) -> np.ndarray:
        return np.arange(self.n_orientations) * np.pi / self.n_orientations

    @property
    def key(self) -> str:
        return f"S{self.n_scales}_O{self.n_orientations}_N{self.image_size}"


def build_filter_bank(n_scales: int = 2, n_orientations: int = 4,
                      image_size: int = 32) -> FilterBank:
    if image_size < 16:
        raise ConfigError("image_size must be >= 16")
    if not 1 <= n_scales <= 5:
        raise ConfigError("n_scales must be in [1, 5]")
    if not 2 <= n_orientations <= 8:
        raise ConfigError("n_orientations must be in [2, 8]")
    n = image_size
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    radius = np.hypot(fx, fy)
    angle = np.arctan2(fy, fx)
    safe_r = np.where(radius > 0, radius, 1.0)

    wavelengths = tuple(BASE_WAVELENGTH * 2.0 ** s for s in range(n_scales))
    filters = np.zeros((n_scales, n_orientations, n, n), dtype=np.complex128)
    for s, lam in enumerate(wavelengths):
        radial = np.exp(-np.log(safe_r * lam) ** 2 / (2 * np.log(RADIAL_SIGMA) ** 2))
        radial[radius == 0] = 0.0
        for o in range(n_orientations):
            theta = o * np.pi / n_orientations
            delta = wrap(angle - theta - np.pi)
            angular = np.where(np.abs(delta) < np.pi / 2,
                               np.cos(delta) ** (n_orientations - 1), 0.0)
            filters[s, o] = radial * angular
    if n % 2 == 0:
        # the Nyquist row/column is its own mirror image and cannot be one-sided
        filters[..., n // 2, :] = 0.0
        filters[..., :, n // 2] = 0.0
    return FilterBank(n_scales, n_orientations, n, filters, wavelengths)


@dataclass(frozen=True)
class PhaseMap:
    phase: np.ndarray  # (S, O, H, W) in (-pi, pi]
    amplitude: np.ndarray


@dataclass(frozen=True)
class PhaseDiffStack:
    diff: np.ndarray  # (S, O, H, W) in (-pi, pi], zero where masked out
    mask: np.ndarray


def _responses(frames: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Complex responses for a stack of frames: (T, S, O, H, W)."""
    spec = np.fft.fft2(frames)
    return np.fft.ifft2(spec[:, None, None] * bank.filters[None])


def _check_size(frame: np.ndarray, bank: FilterBank) -> None:
    if frame.shape[-2:] != (bank.image_size, bank.image_size):
        raise ValidationError(
            f"frame is {frame.shape[-2:]}, filter bank expects {bank.image_size}x{bank.image_size}")


def decompose(frame, bank: FilterBank) -> PhaseMap:
    frame = to_gray(frame)
    _check_size(frame, bank)
    r = _responses(frame[None], bank)[0]
    return PhaseMap(wrap(np.angle(r)), np.abs(r))


def phase_difference(prev: PhaseMap, curr: PhaseMap,
                     amplitude_quantile: float = 0.5) -> PhaseDiffStack:
    if prev.phase.shape != curr.phase.shape:
        raise ValidationError("phase maps differ in shape")
    if not 0.0 <= amplitude_quantile < 1.0:
        raise ConfigError("amplitude_quantile must be in [0, 1)")
    thresh = np.quantile(np.concatenate([prev.amplitude.ravel(), curr.amplitude.ravel()]),
                         amplitude_quantile)
    mask = np.minimum(prev.amplitude, curr.amplitude) > thresh
    diff = np.where(mask, wrap(curr.phase - prev.phase), 0.0)
    return PhaseDiffStack(diff, mask)


def sequence_phase_diffs(video, bank: FilterBank,
                         quantile: float = 0.5) -> List[PhaseDiffStack]:
    """Phase differences between consecutive frames of a video.

    ``video`` is a :class:`~va_lds.dataio.VideoSequence` or a ``(T, H, W)``
    array.
    """
    frames = video.images() if hasattr(video, "images") else np.asarray(video)
    if len(frames) < 2:
        raise ValidationError("need at least two frames for phase differences")
    maps = [decompose(f, bank) for f in frames]
    return [phase_difference(a, b, quantile) for a, b in zip(maps, maps[1:])]


def video_phase_features(frames: np.ndarray, bank: FilterBank, quantile: float = 0.5,
                         chunk: int = 256) -> np.ndarray:
    """Batched :func:`sequence_phase_diffs` as a ``(T-1, S*O, H, W)`` float32 array."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = to_gray(frames)
    if len(frames) < 2:
        raise ValidationError("need at least two frames for phase differences")
    _check_size(frames, bank)
    out = []
    prev = None
    for start in range(0, len(frames), chunk):
        r = _responses(frames[start:start + chunk], bank)
        if prev is not None:
            r = np.concatenate([prev, r])
        phase, amp = wrap(np.angle(r)), np.abs(r)
        for t in range(1, len(r)):
            joint = np.concatenate([amp[t - 1].ravel(), amp[t].ravel()])
            thresh = np.quantile(joint, quantile)
            mask = np.minimum(amp[t - 1], amp[t]) > thresh
            out.append(np.where(mask, wrap(phase[t] - phase[t - 1]), 0.0))
        prev = r[-1:]
    s, o, h, w = bank.filters.shape
    return np.stack(out).reshape(len(out), s * o, h, w).astype(np.float32)


# -- cache --------------------------------------------------------------------

_MAGIC = b"VAPD"
_HEADER = struct.Struct("<4sIIIIII8s")  # magic, version, S, O, H, W, count, dtype


def cache_path(cache_dir: Path, video_id: str, bank: FilterBank, quantile: float) -> Path:
    return Path(cache_dir) / f"{video_id}.{bank.key}_q{quantile:g}.pdiff"


def save_phase_cache(path: Path, diffs: np.ndarray, n_scales: int, n_orientations: int) -> None:
    """Write ``(count, S*O, H, W)`` diffs with a fixed binary header."""
    diffs = np.ascontiguousarray(diffs, dtype=np.float32)
    count, _, h, w = diffs.shape
    header = _HEADER.pack(_MAGIC, 1, n_scales, n_orientations, h, w, count,
                          b"float32".ljust(8, b"\0"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(diffs.tobytes())


def load_phase_cache(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, s, o, h, w, count, dtype = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValidationError(f"{path}: not a phase-difference cache file")
    data = np.frombuffer(raw, dtype=dtype.rstrip(b"\0").decode(), offset=_HEADER.size)
    return data.reshape(count, s * o, h, w).copy()


def cached_video_features(video, bank: FilterBank, quantile: float,
                          cache_dir=None) -> np.ndarray:
    """Phase features for one video, reusing ``cache_dir`` when given."""
    if cache_dir is not None:
        path = cache_path(cache_dir, video.video_id, bank, quantile)
        if path.exists():
            feats = load_phase_cache(path)
            if len(feats) == len(video) - 1:
                return feats
    feats = video_phase_features(video.images(), bank, quantile)
    if cache_dir is not None:
        save_phase_cache(path, feats, bank.n_scales, bank.n_orientations)
    return feats
