"""With/without LDS comparison on skewed synthetic data.

The rare-label subset for a target is every held-out frame whose label
falls in a bin whose smoothed training density is in the bottom decile.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import List

import numpy as np

from .dataio import SynthConfig, generate_synthetic_dataset, make_folds
from .evaluate import ccc, mean_ccc
from .lds import LDSParams, bin_index, empirical_density, smooth_density
from .model import ModelConfig
from .train import TrainConfig, fit, model_from_result, predict_prepared, prepare_videos

ABLATION_SYNTH = SynthConfig(n_videos=100, frames_per_video=500, image_size=16,
                             imbalance_exponent=3.0, noise_std=0.1)
ABLATION_MODEL = ModelConfig(image_size=16, mode="spatial_only", cnn_channels=(8, 16, 16),
                             spatial_feature_dim=16, mlp_hidden=16, recurrent_hidden=16,
                             window_length=16)
ABLATION_TRAIN = TrainConfig(epochs=10, batch_windows=32, window_length=16, learning_rate=0.2,
                             fold_mode="fixed")


@dataclass
class AblationRun:
    seed: int
    lds_enabled: bool
    pooled_valence: float
    pooled_arousal: float
    rare_valence: float
    rare_arousal: float
    n_rare: tuple
    seconds: float

    @property
    def pooled_mean(self) -> float:
        return mean_ccc(self.pooled_valence, self.pooled_arousal)

    @property
    def rare_mean(self) -> float:
        return mean_ccc(self.rare_valence, self.rare_arousal)


def rare_bins(labels: np.ndarray, params: LDSParams, decile: float = 0.1) -> np.ndarray:
    """Boolean mask over bins whose smoothed density is in the bottom ``decile``."""
    dens = smooth_density(empirical_density(labels, params.n_bins), params.kernel).density
    return dens <= np.quantile(dens, decile)


def run_ablation(seed: int, lds_enabled: bool, synth: SynthConfig = ABLATION_SYNTH,
                 model_config: ModelConfig = ABLATION_MODEL,
                 train_config: TrainConfig = ABLATION_TRAIN, prepared=None) -> AblationRun:
    t0 = time.perf_counter()
    if prepared is None:
        videos = generate_synthetic_dataset(replace(synth, seed=seed))
        prepared = prepare_videos(videos, model_config)
    tc = replace(train_config, seed=seed, lds_enabled=lds_enabled)
    split = make_folds([pv.video_id for pv in prepared], tc.k_folds, seed)
    result = fit(prepared, split, 0, model_config, tc)
    model = model_from_result(result, model_config)

    by_id = {pv.video_id: pv for pv in prepared}
    train = [by_id[i] for i in split.train_ids(0)]
    val = [by_id[i] for i in sorted(split.val_ids(0))]
    train_labels = np.concatenate([pv.labels[pv.mask] for pv in train])
    preds = np.concatenate([predict_prepared(model, pv, tc.window_length)[pv.mask] for pv in val])
    truth = np.concatenate([pv.labels[pv.mask] for pv in val])

    pooled, rare, n_rare = [], [], []
    for d in (0, 1):
        pooled.append(ccc(preds[:, d], truth[:, d]))
        rb = rare_bins(train_labels[:, d], tc.lds)
        sel = rb[bin_index(np.linspace(-1, 1, tc.lds.n_bins + 1), truth[:, d])]
        rare.append(ccc(preds[sel, d], truth[sel, d]))
        n_rare.append(int(sel.sum()))
    return AblationRun(seed, lds_enabled, pooled[0], pooled[1], rare[0], rare[1],
                       tuple(n_rare), time.perf_counter() - t0)


def run_ablation_pair(seed: int, **kwargs) -> List[AblationRun]:
    """Both arms on the same data for one seed."""
    synth = kwargs.pop("synth", ABLATION_SYNTH)
    model_config = kwargs.get("model_config", ABLATION_MODEL)
    t0 = time.perf_counter()
    prepared = prepare_videos(generate_synthetic_dataset(replace(synth, seed=seed)), model_config)
    setup = time.perf_counter() - t0
    runs = [run_ablation(seed, flag, synth, prepared=prepared, **kwargs) for flag in (False, True)]
    for r in runs:
        r.seconds += setup
    return runs
