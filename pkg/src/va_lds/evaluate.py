"""Concordance correlation coefficient, challenge criterion and missing-frame imputation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import SENTINEL
from .errors import ValidationError

Pair = Tuple[float, float]


def ccc_terms(x, y):
    """Numerator and denominator of the covariance form of CCC.

    Works on numpy arrays and torch tensors alike (only ``.mean()`` and
    arithmetic are used), so the training loss shares this exact formula.
    """
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = (dx * dy).mean()
    var_x = (dx * dx).mean()
    var_y = (dy * dy).mean()
    return 2.0 * cov, var_x + var_y + (mx - my) ** 2


def ccc_flagged(x: Sequence[float], y: Sequence[float]) -> Tuple[float, bool]:
    """CCC with population moments plus a flag for the 0/0 case.

    Two constant, equal sequences are perfectly concordant by convention
    (returns ``(1.0, True)``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("ccc needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise ValidationError("ccc needs at least 2 points")
    num, den = ccc_terms(x, y)
    if den == 0.0:
        return 1.0, True
    return float(num / den), False


def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    return ccc_flagged(x, y)[0]


def mean_ccc(v: float, a: float) -> float:
    return (v + a) / 2


def impute_missing(predictions: Sequence[Optional[Pair]],
                   available: Optional[Sequence[bool]] = None) -> List[Pair]:
    """Fill frames that have no prediction.

    Missing frames before the first available one get the ``(-5, -5)``
    sentinel; any later missing frame repeats the previous emitted value.
    ``available`` (optional) marks extra frames as missing even when a
    value is present.
    """
    out: List[Pair] = []
    last: Optional[Pair] = None
    for i, p in enumerate(predictions):
        missing = p is None or (available is not None and not available[i])
        if not missing and tuple(p) == (SENTINEL, SENTINEL) and last is None:
            # an already-imputed leading frame
            missing = True
        if missing:
            out.append(last if last is not None else (SENTINEL, SENTINEL))
        else:
            last = (float(p[0]), float(p[1]))
            out.append(last)
    return out


@dataclass
class EvalReport:
    per_video: Dict[str, Pair]
    pooled: Pair
    mean_ccc: float
    n_frames_scored: int
    pooling: str = "pooled"
    degenerate: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"pooling\t{self.pooling}",
            f"mean_ccc\t{self.mean_ccc!r}",
            f"pooled_valence_ccc\t{self.pooled[0]!r}",
            f"pooled_arousal_ccc\t{self.pooled[1]!r}",
            f"n_frames_scored\t{self.n_frames_scored}",
            f"degenerate\t{','.join(self.degenerate) or '-'}",
            "video_id\tvalence_ccc\tarousal_ccc",
        ]
        for vid in sorted(self.per_video):
            v, a = self.per_video[vid]
            lines.append(f"{vid}\t{v!r}\t{a!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rows = [ln.split("\t") for ln in text.strip().splitlines()]
        head = {r[0]: r[1] for r in rows[:6]}
        per_video = {r[0]: (float(r[1]), float(r[2])) for r in rows[7:]}
        deg = head["degenerate"]
        return cls(
            per_video=per_video,
            pooled=(float(head["pooled_valence_ccc"]), float(head["pooled_arousal_ccc"])),
            mean_ccc=float(head["mean_ccc"]),
            n_frames_scored=int(head["n_frames_scored"]),
            pooling=head["pooling"],
            degenerate=[] if deg == "-" else deg.split(","),
        )


def score_predictions(predictions: Dict[str, np.ndarray], targets: Dict[str, np.ndarray],
                      pooling: str = "pooled") -> EvalReport:
    """Score per-video ``(T, 2)`` prediction arrays against labels.

    Frames whose ground truth is the sentinel are excluded. Videos with
    fewer than two scored frames contribute to the pooled CCC only.
    """
    if pooling not in ("pooled", "per_video"):
        raise ValidationError(f"unknown pooling {pooling!r}")
    per_video: Dict[str, Pair] = {}
    degenerate: List[str] = []
    pooled_p, pooled_t = [], []
    for vid in targets:
        t = np.asarray(targets[vid], dtype=np.float64)
        p = np.asarray(predictions[vid], dtype=np.float64)
        if p.shape != t.shape:
            raise ValidationError(f"{vid}: predictions {p.shape} vs targets {t.shape}")
        keep = t[:, 0] != SENTINEL
        p, t = p[keep], t[keep]
        pooled_p.append(p)
        pooled_t.append(t)
        if len(t) >= 2:
            (cv, fv), (ca, fa) = ccc_flagged(p[:, 0], t[:, 0]), ccc_flagged(p[:, 1], t[:, 1])
            per_video[vid] = (cv, ca)
            degenerate += [f"{vid}:valence"] * fv + [f"{vid}:arousal"] * fa
    p = np.concatenate(pooled_p) if pooled_p else np.zeros((0, 2))
    t = np.concatenate(pooled_t) if pooled_t else np.zeros((0, 2))
    if len(t) < 2:
        raise ValidationError("fewer than two scorable frames")
    (cv, fv), (ca, fa) = ccc_flagged(p[:, 0], t[:, 0]), ccc_flagged(p[:, 1], t[:, 1])
    degenerate += ["pooled:valence"] * fv + ["pooled:arousal"] * fa
    if pooling == "pooled":
        crit = mean_ccc(cv, ca)
    else:
        crit = float(np.mean([mean_ccc(*vals) for vals in per_video.values()])) \
            if per_video else math.nan
    return EvalReport(per_video, (cv, ca), crit, int(len(t)), pooling, degenerate)


def evaluate(model, videos, pooling: str = "pooled", **predict_kwargs) -> EvalReport:
    """Run ``model`` over aligned videos and score it.

    ``model`` is a :class:`~va_lds.model.TwoStreamRegressor` or a checkpoint path.
    """
    from .train import load_checkpoint, predict_videos

    if not hasattr(model, "forward"):
        model = load_checkpoint(model)[0]
    preds = predict_videos(model, videos, **predict_kwargs)
    targets = {v.video_id: v.labels() for v in videos}
    return score_predictions(preds, targets, pooling)
