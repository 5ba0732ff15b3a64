"""Annotation ingestion, frame alignment, fold splits and synthetic data.

On-disk layout (real and synthetic datasets alike)::

    root/
      index.tsv            # "video_id<TAB>relative/dir" per line, with header
      <video_id>/
        00000.png 00001.png ...
        annotation.txt     # "valence,arousal" header, then one "v,a" per frame
"""
from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.special import ndtr

from . import SENTINEL
from .errors import ConfigError, EmptySequenceError, ParseError, ValidationError

log = logging.getLogger(__name__)

HEADER = "valence,arousal"
INDEX_FILE = "index.tsv"
ANNOTATION_FILE = "annotation.txt"
LUMA = np.array([0.299, 0.587, 0.114])


def _check_label_pair(v: float, a: float) -> None:
    for x in (v, a):
        if not (x == SENTINEL or -1.0 <= x <= 1.0):
            raise ValidationError(f"label {x} outside [-1, 1] and not the -5 sentinel")
    if (v == SENTINEL) != (a == SENTINEL):
        raise ValidationError("valence and arousal must both be annotated or both be -5")


@dataclass
class FrameRecord:
    video_id: str
    frame_index: int
    image_ref: Any
    valence: float
    arousal: float

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError("frame_index must be non-negative")
        _check_label_pair(self.valence, self.arousal)

    @property
    def annotated(self) -> bool:
        return self.valence != SENTINEL


@dataclass
class VideoSequence:
    video_id: str
    frames: List[FrameRecord] = field(default_factory=list)

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError(f"{self.video_id}: frame indices must strictly increase")

    def __len__(self):
        return len(self.frames)

    def labels(self) -> np.ndarray:
        """``(T, 2)`` float64 array of (valence, arousal); sentinels kept."""
        return np.array([(f.valence, f.arousal) for f in self.frames], dtype=np.float64)

    def annotated_mask(self) -> np.ndarray:
        return np.array([f.annotated for f in self.frames], dtype=bool)

    def images(self) -> np.ndarray:
        """``(T, H, W)`` float32 grayscale frames in [0, 1]."""
        return np.stack([load_image(f.image_ref) for f in self.frames])


def load_image(ref) -> np.ndarray:
    """Grayscale float32 image in [0, 1] from an array or an image path."""
    if isinstance(ref, (str, Path)):
        with Image.open(ref) as im:
            arr = np.asarray(im)
    else:
        arr = np.asarray(ref)
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = arr[..., :3] @ LUMA
    return arr.astype(np.float32)


def parse_annotation_file(text: str) -> List[Tuple[float, float]]:
    if not text.strip():
        raise ParseError("empty annotation file")
    lines = text.split("\n")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 'valence,arousal', got {line!r}", lineno)
        try:
            v, a = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric value in {line!r}", lineno) from None
        try:
            _check_label_pair(v, a)
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        out.append((v, a))
    return out


def format_annotation_file(pairs: Sequence[Tuple[float, float]]) -> str:
    body = "".join(f"{v:.6f},{a:.6f}\n" for v, a in pairs)
    return f"{HEADER}\n{body}"


def align_frames(images: Sequence[Any], annotations: Sequence[Tuple[float, float]],
                 video_id: str = "video",
                 frame_indices: Optional[Sequence[int]] = None) -> VideoSequence:
    """Drop leading unannotated frames, then pair images and labels by position.

    The result is truncated to the shorter of the two remaining lists.
    Interior ``(-5, -5)`` frames stay in the sequence (see
    :meth:`VideoSequence.annotated_mask`).
    """
    if not images or not annotations:
        raise EmptySequenceError(f"{video_id}: no images or no annotations")
    lead = 0
    while lead < len(annotations) and annotations[lead][0] == SENTINEL:
        lead += 1
    if lead == len(annotations):
        raise EmptySequenceError(f"{video_id}: every frame is unannotated")
    if frame_indices is None:
        frame_indices = range(len(images))
    imgs = list(zip(frame_indices, images))[lead:]
    anns = annotations[lead:]
    frames = [FrameRecord(video_id, int(i), img, float(v), float(a))
              for (i, img), (v, a) in zip(imgs, anns)]
    if not frames:
        raise EmptySequenceError(f"{video_id}: no images left after dropping {lead} leading frames")
    return VideoSequence(video_id, frames)


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: Dict[str, int]

    def val_ids(self, fold: int) -> List[str]:
        return [v for v, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [v for v, f in self.assignment.items() if f != fold]


def make_folds(video_ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    if k < 2:
        raise ConfigError("k must be >= 2")
    if k > len(video_ids):
        raise ConfigError(f"k={k} folds but only {len(video_ids)} videos")
    if len(set(video_ids)) != len(video_ids):
        raise ConfigError("duplicate video ids")
    order = np.random.default_rng(seed).permutation(len(video_ids))
    ids = sorted(video_ids)
    return FoldSplit(k, {ids[j]: pos % k for pos, j in enumerate(order)})


# -- synthetic data -----------------------------------------------------------

GRATING_WAVELENGTH = 8.0  # px
MAX_SPEED = 3.0  # px / frame, below half a wavelength so phase never aliases
SHUTTER = 2.0  # exposure length in frame intervals; sets motion-blur strength
BASE_CONTRAST = 0.25


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    frames_per_video: int = 100
    image_size: int = 32
    imbalance_exponent: float = 0.0
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_videos < 1:
            raise ConfigError("n_videos must be positive")
        if self.frames_per_video < 2:
            raise ConfigError("frames_per_video must be >= 2")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.imbalance_exponent < 0 or self.noise_std < 0:
            raise ConfigError("imbalance_exponent and noise_std must be >= 0")


def _uniform_sweep(rng, n: int) -> np.ndarray:
    """Smooth trajectory in [-1, 1] whose marginal is close to uniform.

    A triangle wave with random phase and period; a random tempo wobble keeps
    it from looking perfectly periodic.
    """
    period = rng.uniform(40, 160)
    wobble = 0.15 * np.sin(2 * np.pi * (np.arange(n) / rng.uniform(80, 300) + rng.uniform()))
    u = rng.uniform() + np.cumsum(1.0 + wobble) / period
    return 1.0 - 4.0 * np.abs(np.mod(u, 1.0) - 0.5)


def skew_labels(z: np.ndarray, exponent: float) -> np.ndarray:
    """Map uniform [-1, 1] samples to a zero-peaked marginal."""
    return np.sign(z) * np.abs(z) ** (1.0 + exponent)


def _render_video(rng, valence: np.ndarray, arousal: np.ndarray, size: int,
                  noise_std: float) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    speed = (arousal + 1.0) / 2.0 * MAX_SPEED
    phase = rng.uniform(0, 2 * np.pi) + np.cumsum(2 * np.pi * speed / GRATING_WAVELENGTH)
    contrast = BASE_CONTRAST * np.sinc(speed * SHUTTER / GRATING_WAVELENGTH)
    brightness = 0.5 + 0.2 * valence
    k = 2 * np.pi / GRATING_WAVELENGTH
    frames = (brightness[:, None, None]
              + contrast[:, None, None] * np.cos(k * proj[None] - phase[:, None, None]))
    frames += noise_std * rng.standard_normal(frames.shape)
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(config: SynthConfig) -> List[VideoSequence]:
    """Drifting-grating videos with known (valence, arousal) per frame.

    Arousal is an affine map of the grating's drift speed (visible both as
    phase advance between frames and as motion-blur contrast loss); valence
    is an affine map of mean brightness. ``imbalance_exponent`` bends the
    otherwise near-uniform label marginals towards zero.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_videos)
    videos = []
    width = len(str(config.n_videos - 1))
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        n = config.frames_per_video
        v = np.round(skew_labels(_uniform_sweep(rng, n), config.imbalance_exponent), 6)
        a = np.round(skew_labels(_uniform_sweep(rng, n), config.imbalance_exponent), 6)
        v, a = np.clip(v, -1, 1), np.clip(a, -1, 1)
        frames = _render_video(rng, v, a, config.image_size, config.noise_std)
        vid = f"synth{i:0{width}d}"
        videos.append(VideoSequence(vid, [
            FrameRecord(vid, t, frames[t], float(v[t]), float(a[t])) for t in range(n)
        ]))
    return videos


# -- manifest I/O -------------------------------------------------------------

def write_dataset(videos: Sequence[VideoSequence], root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = ["video_id\tpath"]
    for video in videos:
        d = root / video.video_id
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        width = max(5, len(str(video.frames[-1].frame_index)))
        for f in video.frames:
            img = np.asarray(f.image_ref) if not isinstance(f.image_ref, (str, Path)) \
                else np.asarray(Image.open(f.image_ref))
            if img.dtype != np.uint8:
                img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(d / f"{f.frame_index:0{width}d}.png")
        pairs = [(f.valence, f.arousal) for f in video.frames]
        (d / ANNOTATION_FILE).write_text(format_annotation_file(pairs))
        index.append(f"{video.video_id}\t{video.video_id}")
    (root / INDEX_FILE).write_text("\n".join(index) + "\n")


def read_index(root: Path) -> List[Tuple[str, Path]]:
    root = Path(root)
    path = root / INDEX_FILE
    if not path.exists():
        raise ValidationError(f"no {INDEX_FILE} under {root}")
    out = []
    for line in path.read_text().splitlines()[1:]:
        if line.strip():
            vid, rel = line.split("\t")
            out.append((vid, root / rel))
    return out


def read_video(video_id: str, directory: Path, eager: bool = True) -> VideoSequence:
    """Load one video directory. ``eager`` decodes images into arrays."""
    paths = sorted(directory.glob("*.png"), key=lambda p: int(p.stem))
    anns = parse_annotation_file((directory / ANNOTATION_FILE).read_text())
    refs = [load_image(p) if eager else p for p in paths]
    return align_frames(refs, anns, video_id, [int(p.stem) for p in paths])


def read_dataset(root: Path, eager: bool = True) -> List[VideoSequence]:
    return [read_video(vid, d, eager) for vid, d in read_index(root)]


def all_labels(videos: Sequence[VideoSequence]) -> np.ndarray:
    """Annotated ``(N, 2)`` labels pooled over videos, sentinels removed."""
    labs = [v.labels()[v.annotated_mask()] for v in videos]
    return np.concatenate(labs) if labs else np.zeros((0, 2))


def histogram_ratio(labels: np.ndarray, n_bins: int = 20) -> float:
    """max/min bin count over [-1, 1]; ``inf`` when some bin is empty."""
    counts, _ = np.histogram(labels, bins=n_bins, range=(-1, 1))
    return math.inf if counts.min() == 0 else counts.max() / counts.min()
