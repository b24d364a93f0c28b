"""Saliency metrics: MAE, max F-measure with PR and F curves, S-measure and J-mean.

Dataset scores are means of per-image scores. Every reduction over images
sorts its terms first, so a report does not depend on sample order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, ValidationError

BETA2 = 0.3
THRESHOLDS = np.arange(256) / 255.0
# Machine epsilon as used by the reference structure-measure code.
EPS = float(np.finfo(np.float64).eps)


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValidationError("ground truth must be binary (0/1)")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValidationError("prediction values must lie in [0, 1]")
    return p, g


def _stable_mean(values: Iterable[float]) -> float:
    vals = sorted(float(v) for v in values)
    return math.fsum(vals) / len(vals) if vals else float("nan")


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    """Column sums of [n, k] with each column sorted first (order-free)."""
    return np.sort(stack, axis=0).sum(axis=0)


# --------------------------------------------------------------------------
# per-image metrics


def mae(pred, gt) -> float:
    p, g = _check(pred, gt)
    return float(np.abs(p - g).mean())


def threshold_counts(pred, gt) -> tuple[np.ndarray, np.ndarray, int]:
    """True positives and predicted positives at each of the 256 thresholds.

    Position ``k`` counts pixels with ``pred >= k/255``. A single sort-free
    histogram replaces 256 separate binarizations.
    """
    p, g = _check(pred, gt)
    p = p.ravel()
    g = g.ravel().astype(bool)
    # Number of thresholds <= value, minus one: the last threshold a pixel clears.
    top = np.searchsorted(THRESHOLDS, p, side="right") - 1
    all_hist = np.bincount(top, minlength=256)
    tp_hist = np.bincount(top[g], minlength=256)
    predicted = np.cumsum(all_hist[::-1])[::-1]
    tp = np.cumsum(tp_hist[::-1])[::-1]
    return tp, predicted, int(g.sum())


def precision_recall(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold precision and recall of one map.

    With no predicted positives precision is 1 (nothing claimed, nothing wrong);
    with an empty ground truth recall is 1.
    """
    tp, predicted, positives = threshold_counts(pred, gt)
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / positives if positives > 0 else np.ones(256)
    return precision, recall


def f_measure(precision, recall, beta2: float = BETA2) -> np.ndarray:
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def max_f(preds, gts, beta2: float = BETA2) -> tuple[float, np.ndarray, np.ndarray]:
    """Max F over 256 thresholds from dataset-mean precision and recall.

    Accepts a single map pair or sequences of them. Returns
    ``(max_f, pr_curve[256, 2], f_curve[256])``.
    """
    if isinstance(preds, np.ndarray) and not isinstance(gts, (list, tuple)):
        preds, gts = [preds], [gts]
    pr = [precision_recall(p, g) for p, g in zip(preds, gts, strict=True)]
    if not pr:
        raise ValidationError("max_f needs at least one map")
    n = len(pr)
    precision = _sorted_sum(np.stack([a for a, _ in pr])) / n
    recall = _sorted_sum(np.stack([b for _, b in pr])) / n
    f = f_measure(precision, recall, beta2)
    return float(f.max()), np.stack([precision, recall], axis=1), f


def j_score(pred, gt, threshold: float = 0.5) -> float:
    """IoU of ``pred >= threshold`` against the mask; two empty masks score 1."""
    p, g = _check(pred, gt)
    b = p >= threshold
    g = g.astype(bool)
    union = np.logical_or(b, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(b, g).sum() / union)


def j_mean(preds, gts, threshold: float = 0.5) -> float:
    if isinstance(preds, np.ndarray) and not isinstance(gts, (list, tuple)):
        return j_score(preds, gts, threshold)
    return _stable_mean(j_score(p, g, threshold) for p, g in zip(preds, gts, strict=True))


# ---- S-measure


def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def _s_object(p: np.ndarray, g: np.ndarray) -> float:
    fg = g.astype(bool)
    u = g.mean()
    o_fg = _object_score(p[fg])
    o_bg = _object_score(1.0 - p[~fg])
    return float(u * o_fg + (1 - u) * o_bg)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    return 1.0 if beta == 0 else 0.0


def _centroid(g: np.ndarray) -> tuple[int, int]:
    """1-based (column, row) centroid rounded half away from zero; frame centre if empty."""
    rows, cols = g.shape
    total = g.sum()
    if total == 0:
        cx, cy = cols / 2, rows / 2
    else:
        cx = (g.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
        cy = (g.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(math.floor(cx + 0.5)), int(math.floor(cy + 0.5))


def _s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    parts = [(w1, slice(0, y), slice(0, x)), (w2, slice(0, y), slice(x, w)),
             (w3, slice(y, h), slice(0, x)), (w4, slice(y, h), slice(x, w))]
    total = 0.0
    for weight, rs, cs in parts:
        if p[rs, cs].size:
            total += weight * _ssim(p[rs, cs], g[rs, cs])
    return total


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: ``alpha`` object-aware plus ``1 - alpha`` region-aware similarity.

    An all-background mask scores ``1 - mean(pred)``, an all-foreground mask
    ``mean(pred)``; otherwise the result is clamped at 0.
    """
    p, g = _check(pred, gt)
    p = p.reshape(p.shape[-2:]) if p.ndim > 2 else p
    g = g.reshape(g.shape[-2:]) if g.ndim > 2 else g
    if p.ndim != 2:
        raise DimensionError(f"s_measure expects a single 2-D map, got {np.shape(pred)}")
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    q = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return max(float(q), 0.0)


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    mae: float
    max_f: float
    s_measure: float
    j_mean: float
    pr_curve: np.ndarray
    f_curve: np.ndarray
    count: int
    per_sequence: dict[str, dict[str, float]] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        return {"mae": self.mae, "max_f": self.max_f, "s_measure": self.s_measure, "j_mean": self.j_mean}

    def write_csv(self, out_dir: Union[str, Path]) -> None:
        """``metrics.csv``, ``pr_curve.csv``, ``f_curve.csv`` and ``per_sequence.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, repr(float(v))])
            w.writerow(["count", self.count])
        with open(out / "pr_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, (p, r) in zip(THRESHOLDS, self.pr_curve):
                w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
        with open(out / "f_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "f"])
            for t, f in zip(THRESHOLDS, self.f_curve):
                w.writerow([repr(float(t)), repr(float(f))])
        with open(out / "per_sequence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "mae", "max_f", "s_measure", "j_mean", "frames"])
            for name in sorted(self.per_sequence):
                row = self.per_sequence[name]
                w.writerow([name] + [repr(float(row[k])) for k in ("mae", "max_f", "s_measure", "j_mean")]
                           + [int(row["frames"])])


def _summarize(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> dict[str, float]:
    best, _, _ = max_f(list(preds), list(gts))
    return {
        "mae": _stable_mean(mae(p, g) for p, g in zip(preds, gts)),
        "max_f": best,
        "s_measure": _stable_mean(s_measure(p, g) for p, g in zip(preds, gts)),
        "j_mean": j_mean(list(preds), list(gts)),
        "frames": len(preds),
    }


def report_from_maps(preds: Mapping[tuple[str, int], np.ndarray],
                     gts: Mapping[tuple[str, int], np.ndarray]) -> MetricReport:
    """Score predictions keyed by ``(sequence, frame_index)`` against matching masks.

    Every ground-truth key needs a prediction; all missing keys are listed in
    the raised error.
    """
    missing = sorted(set(gts) - set(preds))
    if missing:
        shown = ", ".join(f"{c}/{i:05d}" for c, i in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise FileNotFoundError(f"missing predictions for {len(missing)} samples: {shown}{more}")
    if not gts:
        raise ValidationError("nothing to evaluate: empty ground-truth set")
    keys = sorted(gts)
    p_list = [np.asarray(preds[k], dtype=np.float64).reshape(np.shape(gts[k])) for k in keys]
    g_list = [np.asarray(gts[k], dtype=np.float64) for k in keys]
    best, pr, f = max_f(p_list, g_list)
    per_seq: dict[str, dict[str, float]] = {}
    for clip in sorted({c for c, _ in keys}):
        idx = [i for i, k in enumerate(keys) if k[0] == clip]
        per_seq[clip] = _summarize([p_list[i] for i in idx], [g_list[i] for i in idx])
    return MetricReport(
        mae=_stable_mean(mae(p, g) for p, g in zip(p_list, g_list)),
        max_f=best,
        s_measure=_stable_mean(s_measure(p, g) for p, g in zip(p_list, g_list)),
        j_mean=j_mean(p_list, g_list),
        pr_curve=pr,
        f_curve=f,
        count=len(keys),
        per_sequence=per_seq,
    )
