"""LDS re-weighted training under cross-validation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .dataio import FoldSplit, VideoSequence, all_labels
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .evaluate import ccc_terms, mean_ccc, score_predictions
from .lds import LDSParams, SmoothingKernel, WeightTable, lds_weight_table, uniform_table
from .model import ModelConfig, TwoStreamRegressor, build_model
from .phasediff import build_filter_bank, cached_video_features

log = logging.getLogger(__name__)

LOSS_KINDS = ("weighted_mse", "weighted_mse_plus_ccc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_windows: int = 16
    window_length: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0
    loss_kind: str = "weighted_mse"
    lds_enabled: bool = True
    lds: LDSParams = field(default_factory=LDSParams)
    seed: int = 0
    k_folds: int = 5
    fold_mode: str = "kfold"  # or "fixed": train/validate on fold 0 only

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_windows < 1 or self.window_length < 1:
            raise ConfigError("epochs, batch_windows and window_length must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.fold_mode not in ("kfold", "fixed"):
            raise ConfigError("fold_mode must be 'kfold' or 'fixed'")

    def fold_indices(self) -> List[int]:
        return [0] if self.fold_mode == "fixed" else list(range(self.k_folds))


# -- losses -------------------------------------------------------------------

def weighted_loss(preds, targets, v_weights, a_weights, mask=None) -> torch.Tensor:
    """Mean over unmasked frames of ``(w_v (v'-v)^2 + w_a (a'-a)^2) / 2``."""
    preds = torch.as_tensor(preds)
    targets = torch.as_tensor(targets, dtype=preds.dtype)
    w = torch.stack([torch.as_tensor(v_weights, dtype=preds.dtype),
                     torch.as_tensor(a_weights, dtype=preds.dtype)], dim=-1)
    if mask is None:
        mask = torch.ones(preds.shape[:-1], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not (preds.shape == targets.shape == w.shape) or mask.shape != preds.shape[:-1]:
        raise ValidationError("preds, targets, weights and mask must align")
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("no unmasked frames in batch")
    sq = w * (preds - targets) ** 2
    return sq[mask].sum() / (2 * n)


def ccc_loss(preds, targets) -> torch.Tensor:
    """``1 - CCC``, differentiable; shares the metric's formula."""
    preds = torch.as_tensor(preds)
    targets = torch.as_tensor(targets, dtype=preds.dtype)
    if preds.shape != targets.shape or preds.ndim != 1 or len(preds) < 2:
        raise ValidationError("ccc_loss needs two equal 1-D sequences of length >= 2")
    if float(targets.var()) == 0.0:
        raise ValidationError("ccc_loss undefined for constant targets")
    num, den = ccc_terms(preds, targets)
    return 1.0 - num / den


def batch_loss(kind, preds, targets, v_w, a_w, mask) -> torch.Tensor:
    loss = weighted_loss(preds, targets, v_w, a_w, mask)
    if kind == "weighted_mse_plus_ccc":
        p, t = preds[mask], targets[mask]
        terms = [ccc_loss(p[:, d], t[:, d]) for d in (0, 1) if len(t) > 1 and t[:, d].var() > 0]
        if terms:
            loss = loss + sum(terms) / len(terms)
    return loss


# -- data preparation ---------------------------------------------------------

@dataclass
class PreparedVideo:
    video_id: str
    frames: torch.Tensor  # (T, 1, H, W)
    diffs: Optional[torch.Tensor]  # (T, S*O, H, W); row t = transition into frame t
    labels: np.ndarray  # (T, 2) with sentinels
    mask: np.ndarray  # (T,) annotated

    def __len__(self):
        return len(self.mask)


def prepare_video(video: VideoSequence, config: ModelConfig, cache_dir=None,
                  bank=None) -> PreparedVideo:
    images = video.images()
    frames = torch.from_numpy(images).unsqueeze(1)
    diffs = None
    if config.mode == "two_stream":
        bank = bank or build_filter_bank(config.n_scales, config.n_orientations, config.image_size)
        feats = cached_video_features(video, bank, config.amplitude_quantile, cache_dir) \
            if len(video) > 1 else np.zeros((0, config.phase_channels) + images.shape[1:], np.float32)
        diffs = torch.cat([torch.zeros((1,) + feats.shape[1:]), torch.from_numpy(feats)])
    return PreparedVideo(video.video_id, frames, diffs, video.labels(), video.annotated_mask())


def prepare_videos(videos: Sequence[VideoSequence], config: ModelConfig, cache_dir=None):
    bank = None
    if config.mode == "two_stream":
        bank = build_filter_bank(config.n_scales, config.n_orientations, config.image_size)
    return [prepare_video(v, config, cache_dir, bank) for v in videos]


def window_starts(length: int, window: int) -> List[int]:
    """Non-overlapping training windows; a short video yields one padded window."""
    if length < window:
        return [0]
    return list(range(0, length - window + 1, window))


def _window(pv: PreparedVideo, start: int, w: int):
    idx = np.arange(start, start + w)
    valid = idx < len(pv)
    idx = np.minimum(idx, len(pv) - 1)
    frames = pv.frames[idx]
    diffs = pv.diffs[idx] if pv.diffs is not None else None
    has_prev = torch.from_numpy((idx > 0) & valid)
    return frames, diffs, has_prev, pv.labels[idx], pv.mask[idx] & valid


def coverage_starts(length: int, window: int) -> List[int]:
    """Window starts covering every frame; the last window is right-aligned."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, window))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


@torch.no_grad()
def predict_prepared(model: TwoStreamRegressor, pv: PreparedVideo, window: int) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = np.zeros((len(pv), 2))
    w = min(window, len(pv))
    starts = coverage_starts(len(pv), w)
    frames, diffs, valid = [], [], []
    for s in starts:
        f, d, v, _, _ = _window(pv, s, w)
        frames.append(f)
        diffs.append(d)
        valid.append(v)
    frames = torch.stack(frames).to(dtype)
    d = torch.stack(diffs).to(dtype) if pv.diffs is not None else None
    preds = model(frames, d, torch.stack(valid)).double().numpy()
    for s, p in zip(starts, preds):
        out[s:s + w] = p
    return out


def predict_videos(model: TwoStreamRegressor, videos, cache_dir=None,
                   window: Optional[int] = None) -> Dict[str, np.ndarray]:
    window = window or model.config.window_length
    prepared = [v if isinstance(v, PreparedVideo) else prepare_video(v, model.config, cache_dir)
                for v in videos]
    return {pv.video_id: predict_prepared(model, pv, window) for pv in prepared}


# -- weights ------------------------------------------------------------------

def lds_tables(labels: np.ndarray, config: TrainConfig):
    """(valence, arousal) weight tables from annotated training labels."""
    if not config.lds_enabled:
        return uniform_table(config.lds.n_bins), uniform_table(config.lds.n_bins)
    return lds_weight_table(labels[:, 0], config.lds), lds_weight_table(labels[:, 1], config.lds)


def frame_weights(labels: np.ndarray, mask: np.ndarray, table: WeightTable, dim: int):
    w = np.zeros(len(labels))
    if mask.any():
        w[mask] = table.lookup(labels[mask, dim])
    return w


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model, optimizer=None, epoch=0, extra=None) -> None:
    payload = {
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = TwoStreamRegressor(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# -- training -----------------------------------------------------------------

@dataclass
class EpochRow:
    fold: int
    epoch: int
    train_loss: float
    val_valence: float
    val_arousal: float

    @property
    def val_mean(self) -> float:
        return mean_ccc(self.val_valence, self.val_arousal)


@dataclass
class FoldResult:
    fold: int
    rows: List[EpochRow]
    best_epoch: int
    best_state: dict
    weight_tables: tuple
    seed: int
    checkpoint: Optional[str] = None

    @property
    def best(self) -> EpochRow:
        return self.rows[self.best_epoch]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fit(videos: Sequence, split: FoldSplit, fold: int, model_config: ModelConfig,
        train_config: TrainConfig, cache_dir=None, out_dir=None,
        weights_override=None) -> FoldResult:
    """Train on all folds but ``fold`` and select the epoch with best held-out mean CCC.

    ``videos`` may be :class:`VideoSequence` or already prepared. Weight
    tables come from the training fold's annotated labels only, unless
    ``weights_override`` supplies explicit (valence, arousal) tables.
    """
    prepared = {}
    for v in videos:
        pv = v if isinstance(v, PreparedVideo) else prepare_video(v, model_config, cache_dir)
        prepared[pv.video_id] = pv
    train_ids, val_ids = split.train_ids(fold), split.val_ids(fold)
    train = [prepared[i] for i in sorted(train_ids)]
    val = [prepared[i] for i in sorted(val_ids)]
    if not train:
        raise ValidationError("empty training fold")

    labels = np.concatenate([pv.labels[pv.mask] for pv in train])
    tables = weights_override or lds_tables(labels, train_config)
    per_video_w = {pv.video_id: (frame_weights(pv.labels, pv.mask, tables[0], 0),
                                 frame_weights(pv.labels, pv.mask, tables[1], 1))
                   for pv in train}

    seed = fold_seed(train_config.seed, fold)
    torch.manual_seed(seed)
    model = build_model(model_config)
    opt = torch.optim.SGD(model.parameters(), lr=train_config.learning_rate,
                          momentum=train_config.momentum)
    rng = np.random.default_rng(seed)
    w = train_config.window_length
    windows = [(pv, s) for pv in train for s in window_starts(len(pv), w)]

    rows: List[EpochRow] = []
    best_state, best_epoch, best_score = None, 0, -math.inf
    for epoch in range(train_config.epochs):
        model.train()
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for b in range(0, len(order), train_config.batch_windows):
            batch = [windows[i] for i in order[b:b + train_config.batch_windows]]
            parts = [_window(pv, s, w) for pv, s in batch]
            mask = np.stack([p[4] for p in parts])
            if not mask.any():
                continue
            frames = torch.stack([p[0] for p in parts])
            diffs = torch.stack([p[1] for p in parts]) if parts[0][1] is not None else None
            valid = torch.stack([p[2] for p in parts])
            targets = torch.from_numpy(np.stack([p[3] for p in parts])).float()
            idx = [np.minimum(np.arange(s, s + w), len(pv) - 1) for pv, s in batch]
            vw = torch.from_numpy(np.stack([per_video_w[pv.video_id][0][i]
                                            for (pv, _), i in zip(batch, idx)])).float()
            aw = torch.from_numpy(np.stack([per_video_w[pv.video_id][1][i]
                                            for (pv, _), i in zip(batch, idx)])).float()
            preds = model(frames, diffs, valid)
            loss = batch_loss(train_config.loss_kind, preds, targets, vw, aw,
                              torch.from_numpy(mask))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"fold {fold} epoch {epoch}: non-finite loss at batch {b // train_config.batch_windows}")
            opt.zero_grad()
            loss.backward()
            if train_config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            opt.step()
            total += float(loss.detach()) * int(mask.sum())
            count += int(mask.sum())
        train_loss = total / max(count, 1)

        if val:
            preds = {pv.video_id: predict_prepared(model, pv, w) for pv in val}
            rep = score_predictions(preds, {pv.video_id: pv.labels for pv in val})
            vv, va = rep.pooled
        else:
            vv = va = math.nan
        rows.append(EpochRow(fold, epoch, train_loss, vv, va))
        score = mean_ccc(vv, va)
        log.info("fold %d epoch %d loss %.5f val ccc %.4f/%.4f", fold, epoch, train_loss, vv, va)
        if best_state is None or score > best_score:
            best_state, best_epoch, best_score = copy.deepcopy(model.state_dict()), epoch, score

    ckpt = None
    if out_dir is not None:
        ckpt = str(Path(out_dir) / f"fold{fold}_best.pt")
        best_model = TwoStreamRegressor(model_config)
        best_model.load_state_dict(best_state)
        save_checkpoint(ckpt, best_model, opt, best_epoch,
                        {"fold": fold, "seed": seed, "train_config": config_echo(train_config)})
    return FoldResult(fold, rows, best_epoch, best_state, tables, seed, ckpt)


def model_from_result(result: FoldResult, config: ModelConfig) -> TwoStreamRegressor:
    model = TwoStreamRegressor(config)
    model.load_state_dict(result.best_state)
    model.eval()
    return model


# -- reporting ----------------------------------------------------------------

def config_echo(cfg) -> dict:
    d = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else dict(cfg)
    flat = {}

    def walk(prefix, obj):
        for k, v in obj.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                walk(key + ".", v)
            else:
                flat[key] = v
    walk("", d)
    return flat


@dataclass
class TrainReport:
    folds: List[FoldResult]
    config: Dict[str, object] = field(default_factory=dict)

    def rows(self) -> List[EpochRow]:
        return [r for f in self.folds for r in f.rows]

    def to_text(self) -> str:
        lines = [f"# {k}={self.config[k]!r}" for k in sorted(self.config)]
        lines.append("fold\tepoch\ttrain_loss\tval_valence_ccc\tval_arousal_ccc\tval_mean_ccc")
        for r in self.rows():
            lines.append(f"{r.fold}\t{r.epoch}\t{r.train_loss!r}\t{r.val_valence!r}\t"
                         f"{r.val_arousal!r}\t{r.val_mean!r}")
        lines.append("fold\tbest_epoch\tvalence_ccc\tarousal_ccc\tmean_ccc\tseed\tcheckpoint")
        for f in self.folds:
            b = f.best
            ck = Path(f.checkpoint).name if f.checkpoint else "-"
            lines.append(f"{f.fold}\t{f.best_epoch}\t{b.val_valence!r}\t{b.val_arousal!r}\t"
                         f"{b.val_mean!r}\t{f.seed}\t{ck}")
        return "\n".join(lines) + "\n"


def cross_validate(videos: Sequence[VideoSequence], split: FoldSplit, model_config: ModelConfig,
                   train_config: TrainConfig, cache_dir=None, out_dir=None,
                   config: Optional[dict] = None) -> TrainReport:
    prepared = prepare_videos(videos, model_config, cache_dir)
    folds = [fit(prepared, split, k, model_config, train_config, cache_dir, out_dir)
             for k in train_config.fold_indices()]
    return TrainReport(folds, config or {})
