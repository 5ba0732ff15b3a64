"""Command-line front end: synth, ingest-check, weights, train, eval, plot-histogram.

Configuration is one flat ``key = value`` file (``#`` starts a comment).
Every key has a default in :data:`DEFAULTS`; unknown keys are rejected.
Command-line flags override the file. Each command writes ``config.txt``
next to its outputs with the fully resolved configuration.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .dataio import (SynthConfig, all_labels, format_annotation_file, generate_synthetic_dataset,
                     make_folds, parse_annotation_file, read_dataset, write_dataset)
from .errors import ConfigError, TrainingDivergedError, VALdsError, ValidationError
from .lds import LDSParams, SmoothingKernel, empirical_density, lds_weight_table, smooth_density
from .model import ModelConfig

# key -> (default, help). The default's type is the key's type.
DEFAULTS: Dict[str, tuple] = {
    "seed": (0, "master seed for synthesis, fold assignment and training"),
    "data": ("data", "dataset root (manifest layout) read by all commands but synth"),
    "out": ("out", "output directory"),
    "cache_dir": ("", "phase-difference cache directory; empty disables caching"),
    "synth.n_videos": (20, "number of synthetic videos"),
    "synth.frames_per_video": (100, "frames per synthetic video"),
    "synth.image_size": (32, "synthetic frame side in pixels"),
    "synth.imbalance_exponent": (0.0, "label skew; 0 gives roughly uniform marginals"),
    "synth.noise_std": (0.02, "pixel noise standard deviation"),
    "lds.enabled": (True, "re-weight the loss by inverse smoothed label density"),
    "lds.n_bins": (200, "label histogram bins over [-1, 1]"),
    "lds.kernel": ("gaussian", "gaussian, triangular, laplacian or delta"),
    "lds.bandwidth": (0.02, "kernel bandwidth in label units"),
    "lds.half_width": (5, "kernel support in bins on each side"),
    "lds.clip_max": (50.0, "upper bound on any weight"),
    "model.mode": ("two_stream", "two_stream or spatial_only"),
    "model.cnn_channels": ("8,16,32", "comma-separated conv widths of the spatial backbone"),
    "model.spatial_feature_dim": (32, "spatial feature size"),
    "model.mlp_hidden": (32, "hidden width of the spatial MLP"),
    "model.temporal_channels": (16, "temporal stream width"),
    "model.recurrent_hidden": (32, "GRU hidden size"),
    "model.n_scales": (2, "filter-bank scales"),
    "model.n_orientations": (4, "filter-bank orientations"),
    "model.amplitude_quantile": (0.5, "phase differences below this amplitude quantile are zeroed"),
    "train.epochs": (5, "training epochs per fold"),
    "train.batch_windows": (16, "windows per minibatch"),
    "train.window_length": (16, "frames per window"),
    "train.learning_rate": (0.01, "SGD learning rate"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.grad_clip": (5.0, "gradient norm clip"),
    "train.loss_kind": ("weighted_mse", "weighted_mse or weighted_mse_plus_ccc"),
    "train.k_folds": (5, "cross-validation folds"),
    "train.fold_mode": ("kfold", "kfold trains every fold; fixed trains fold 0 only"),
    "eval.checkpoint": ("", "checkpoint to evaluate"),
    "eval.predictions": ("", "directory of <video_id>.txt prediction files to score instead"),
    "eval.truth": ("", "directory of <video_id>.txt files used as ground truth instead of the dataset"),
    "eval.fold": (-1, "score only this fold's held-out videos; -1 scores every video"),
    "eval.pooling": ("pooled", "pooled or per_video"),
    "eval.missing_fraction": (0.0, "fraction of frames dropped from predictions before imputation"),
    "plot.n_cells": (20, "2D histogram cells per axis"),
}


# -- config -------------------------------------------------------------------

def _coerce(key: str, raw: str):
    default = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str) -> Dict[str, object]:
    """Parse a flat ``key = value`` document; returns only the keys present."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_config(cfg: Dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


def _fmt(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def resolve_config(args: argparse.Namespace) -> Dict[str, object]:
    cfg = {k: v[0] for k, v in DEFAULTS.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg.update(parse_config(path.read_text()))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "data", None):
        cfg["data"] = args.data
    if args.no_lds:
        cfg["lds.enabled"] = False
    for key in ("checkpoint", "predictions", "truth"):
        if getattr(args, key, None):
            cfg[f"eval.{key}"] = getattr(args, key)
    return cfg


def synth_config(cfg) -> SynthConfig:
    return SynthConfig(cfg["synth.n_videos"], cfg["synth.frames_per_video"],
                       cfg["synth.image_size"], cfg["synth.imbalance_exponent"],
                       cfg["synth.noise_std"], seed=cfg["seed"])


def lds_params(cfg) -> LDSParams:
    kernel = SmoothingKernel(cfg["lds.kernel"], cfg["lds.bandwidth"], cfg["lds.half_width"])
    return LDSParams(cfg["lds.n_bins"], kernel, cfg["lds.clip_max"])


def model_config(cfg, image_size: int) -> ModelConfig:
    try:
        channels = tuple(int(c) for c in str(cfg["model.cnn_channels"]).split(",") if c.strip())
    except ValueError:
        raise ConfigError("model.cnn_channels must be comma-separated integers") from None
    return ModelConfig(
        image_size=image_size, cnn_channels=channels,
        spatial_feature_dim=cfg["model.spatial_feature_dim"], mlp_hidden=cfg["model.mlp_hidden"],
        temporal_channels=cfg["model.temporal_channels"],
        recurrent_hidden=cfg["model.recurrent_hidden"], window_length=cfg["train.window_length"],
        mode=cfg["model.mode"], n_scales=cfg["model.n_scales"],
        n_orientations=cfg["model.n_orientations"],
        amplitude_quantile=cfg["model.amplitude_quantile"])


def train_config(cfg):
    from .train import TrainConfig

    return TrainConfig(
        epochs=cfg["train.epochs"], batch_windows=cfg["train.batch_windows"],
        window_length=cfg["train.window_length"], learning_rate=cfg["train.learning_rate"],
        momentum=cfg["train.momentum"], grad_clip=cfg["train.grad_clip"],
        loss_kind=cfg["train.loss_kind"], lds_enabled=cfg["lds.enabled"], lds=lds_params(cfg),
        seed=cfg["seed"], k_folds=cfg["train.k_folds"], fold_mode=cfg["train.fold_mode"])


# -- helpers ------------------------------------------------------------------

def prepare_out(cfg, force: bool) -> Path:
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    return out


def load_videos(cfg, eager: bool = True):
    root = Path(cfg["data"])
    if not (root / "index.tsv").is_file():
        raise ValidationError(f"no dataset at {root} (index.tsv missing)")
    videos = read_dataset(root, eager)
    if not videos:
        raise ValidationError(f"dataset at {root} has no videos")
    return videos


def label_histogram_text(labels: np.ndarray, n_bins: int = 10) -> str:
    edges = np.linspace(-1, 1, n_bins + 1)
    lines = ["bin_left\tbin_right\tvalence_count\tarousal_count"]
    cv, _ = np.histogram(labels[:, 0], bins=edges)
    ca, _ = np.histogram(labels[:, 1], bins=edges)
    for i in range(n_bins):
        lines.append(f"{edges[i]:.2f}\t{edges[i + 1]:.2f}\t{cv[i]}\t{ca[i]}")
    return "\n".join(lines) + "\n"


def read_prediction_dir(directory: Path) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"prediction directory {directory} not found")
    out = {p.stem: np.array(parse_annotation_file(p.read_text()), dtype=np.float64)
           for p in sorted(directory.glob("*.txt"))}
    if not out:
        raise ValidationError(f"no .txt files in {directory}")
    return out


def drop_and_impute(preds: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Knock out a random ``fraction`` of frames, then fill them by imputation."""
    from .evaluate import impute_missing

    available = rng.random(len(preds)) >= fraction
    return np.array(impute_missing([tuple(p) for p in preds], available), dtype=np.float64)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, force: bool) -> int:
    sc = synth_config(cfg)
    out = prepare_out(cfg, force)
    videos = generate_synthetic_dataset(sc)
    write_dataset(videos, out)
    print(label_histogram_text(all_labels(videos)), end="")
    return 0


def cmd_ingest_check(cfg, force: bool) -> int:
    videos = load_videos(cfg, eager=False)
    n = sum(len(v) for v in videos)
    labels = all_labels(videos)
    print("video_id\tframes\tannotated")
    for v in videos:
        print(f"{v.video_id}\t{len(v)}\t{int(v.annotated_mask().sum())}")
    print(f"# videos={len(videos)} frames={n} annotated={len(labels)}")
    return 0


def cmd_weights(cfg, force: bool) -> int:
    from .plotting import plot_density

    params = lds_params(cfg)
    labels = all_labels(load_videos(cfg, eager=False))
    if len(labels) == 0:
        raise ValidationError("dataset has no annotated frames")
    out = prepare_out(cfg, force)
    for d, target in enumerate(("valence", "arousal")):
        table = lds_weight_table(labels[:, d], params)
        (out / f"weights_{target}.tsv").write_text(table.to_text())
        hist = empirical_density(labels[:, d], params.n_bins)
        plot_density(hist, smooth_density(hist, params.kernel), out / f"density_{target}.png",
                     target)
        w = table.weights
        print(f"{target}\tmin={w.min():.4g}\tmax={w.max():.4g}\tmax_abs_dev={np.abs(w - 1).max():.4g}")
    return 0


def cmd_train(cfg, force: bool) -> int:
    from .train import config_echo, cross_validate

    videos = load_videos(cfg)
    mc = model_config(cfg, videos[0].images().shape[-1])
    tc = train_config(cfg)
    split = make_folds([v.video_id for v in videos], tc.k_folds, cfg["seed"])
    out = prepare_out(cfg, force)
    echo = {**{f"run.{k}": v for k, v in cfg.items() if k not in ("out", "data", "cache_dir")},
            **{f"model.{k}": v for k, v in config_echo(mc).items()}}
    report = cross_validate(videos, split, mc, tc, cfg["cache_dir"] or None, out, echo)
    (out / "train_report.tsv").write_text(report.to_text())
    for f in report.folds:
        print(f"fold {f.fold}: best epoch {f.best_epoch} mean CCC {f.best.val_mean:.4f}")
    return 0


def cmd_eval(cfg, force: bool) -> int:
    from .evaluate import score_predictions
    from .train import load_checkpoint, predict_videos

    if not cfg["eval.checkpoint"] and not cfg["eval.predictions"]:
        raise ConfigError("eval needs --checkpoint or --predictions")
    if cfg["eval.truth"]:
        targets = read_prediction_dir(Path(cfg["eval.truth"]))
        videos = None
    else:
        videos = load_videos(cfg, eager=bool(cfg["eval.checkpoint"]) and not cfg["eval.predictions"])
        if cfg["eval.fold"] >= 0:
            split = make_folds([v.video_id for v in videos], cfg["train.k_folds"], cfg["seed"])
            keep = set(split.val_ids(cfg["eval.fold"]))
            videos = [v for v in videos if v.video_id in keep]
        targets = {v.video_id: v.labels() for v in videos}

    if cfg["eval.predictions"]:
        preds = read_prediction_dir(Path(cfg["eval.predictions"]))
    else:
        ckpt = Path(cfg["eval.checkpoint"])
        if not ckpt.is_file():
            raise ValidationError(f"checkpoint {ckpt} not found")
        if videos is None:
            raise ConfigError("a checkpoint needs the dataset, not eval.truth")
        model, _ = load_checkpoint(ckpt)
        preds = predict_videos(model, videos, cfg["cache_dir"] or None)
    missing = sorted(set(targets) - set(preds))
    if missing:
        raise ValidationError(f"no predictions for {', '.join(missing[:5])}")
    preds = {vid: preds[vid] for vid in targets}

    frac = cfg["eval.missing_fraction"]
    if not 0 <= frac < 1:
        raise ConfigError("eval.missing_fraction must be in [0, 1)")
    if frac > 0:
        rng = np.random.default_rng(cfg["seed"])
        preds = {vid: drop_and_impute(preds[vid], frac, rng) for vid in sorted(preds)}

    out = prepare_out(cfg, force)
    pred_dir = out / "predictions"
    pred_dir.mkdir()
    for vid in sorted(preds):
        (pred_dir / f"{vid}.txt").write_text(format_annotation_file(preds[vid]))
    report = score_predictions(preds, targets, cfg["eval.pooling"])
    _check_report(report)
    (out / "eval_report.tsv").write_text(report.to_text())
    print(f"mean_ccc {report.mean_ccc:.6f} (valence {report.pooled[0]:.6f}, "
          f"arousal {report.pooled[1]:.6f}, {report.n_frames_scored} frames)")
    return 0


def _check_report(report) -> None:
    """The criterion must follow from the report's own fields."""
    from .evaluate import EvalReport, mean_ccc

    if report.pooling == "pooled":
        expected = mean_ccc(*report.pooled)
    else:
        expected = float(np.mean([mean_ccc(*p) for p in report.per_video.values()]))
    again = EvalReport.from_text(report.to_text())
    if not (abs(expected - report.mean_ccc) <= 1e-12 and again.mean_ccc == report.mean_ccc):
        raise VALdsError(f"inconsistent report: mean_ccc {report.mean_ccc} vs {expected}")


def cmd_plot_histogram(cfg, force: bool) -> int:
    from .plotting import cell_ratio, plot_va_histogram, va_histogram

    labels = all_labels(load_videos(cfg, eager=False))
    counts, edges = va_histogram(labels, cfg["plot.n_cells"])
    out = prepare_out(cfg, force)
    plot_va_histogram(labels, out / "va_histogram.png", cfg["plot.n_cells"],
                      f"{len(labels)} annotated frames")
    rows = ["valence_left\tarousal_left\tcount"]
    for i in range(len(counts)):
        for j in range(len(counts)):
            rows.append(f"{edges[i]:.3f}\t{edges[j]:.3f}\t{counts[i, j]}")
    (out / "va_histogram.tsv").write_text("\n".join(rows) + "\n")
    print(f"cells={counts.size} frames={len(labels)} max/min={cell_ratio(counts):.4g}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest-check": cmd_ingest_check,
    "weights": cmd_weights,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot-histogram": cmd_plot_histogram,
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k} (default {_fmt(v[0])!r}): {v[1]}" for k, v in DEFAULTS.items())
    p = argparse.ArgumentParser(
        prog="va-lds", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Valence/arousal regression with label distribution smoothing.",
        epilog="config keys:\n" + keys)
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides seed")
    common.add_argument("--out", metavar="DIR", help="overrides out")
    common.add_argument("--data", metavar="DIR", help="overrides data")
    common.add_argument("--force", action="store_true", help="replace a non-empty output dir")
    common.add_argument("--no-lds", action="store_true", help="sets lds.enabled = false")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "eval":
            sp.add_argument("--checkpoint", metavar="PATH", help="overrides eval.checkpoint")
            sp.add_argument("--predictions", metavar="DIR", help="overrides eval.predictions")
            sp.add_argument("--truth", metavar="DIR", help="overrides eval.truth")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are config errors here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args.force)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, VALdsError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
