"""Pixel confusion counts, the five segmentation metrics, and F1-optimal thresholding."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import EmptyInput, NonBinaryInput, ShapeMismatch

METRIC_ORDER = ("A", "Sn", "Sp", "J", "D")
DEFAULT_GRID = tuple(k / 100 for k in range(1, 100))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise NonBinaryInput(f"{name} must contain only 0 and 1")
        a = a.astype(bool)
    return a


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _binary(pred, "pred"), _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} and gt {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, pred.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else math.nan


def metrics(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, sensitivity, specificity, Jaccard and Dice; NaN where undefined."""
    return {
        "A": _ratio(c.tp + c.tn, c.total),
        "Sn": _ratio(c.tp, c.tp + c.fn),
        "Sp": _ratio(c.tn, c.tn + c.fp),
        "J": _ratio(c.tp, c.tp + c.fp + c.fn),
        "D": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }


def undefined_metrics(values: dict[str, float]) -> list[str]:
    return [k for k in METRIC_ORDER if math.isnan(values[k])]


def pooled_confusion(preds: Sequence, gts: Sequence) -> ConfusionCounts:
    total = ConfusionCounts()
    for p, g in zip(preds, gts):
        total = total + confusion(p, g)
    return total


def sweep_dice(probs: Sequence, gts: Sequence, grid: Sequence[float] = DEFAULT_GRID) -> np.ndarray:
    """Pooled Dice at every grid threshold (pixels at or above a threshold are positive)."""
    if len(probs) == 0 or len(probs) != len(gts):
        raise EmptyInput("need matched, nonempty lists of probabilities and masks")
    p = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in probs])
    g = np.concatenate([_binary(x, "gt").reshape(-1) for x in gts])
    if p.shape != g.shape:
        raise ShapeMismatch("probability maps and masks differ in size")
    thr = np.asarray(grid, dtype=np.float64)
    # counts of positives / true positives with p >= t, via sorted search
    pos_sorted = np.sort(p[g])
    all_sorted = np.sort(p)
    n_pos = pos_sorted.size
    tp = n_pos - np.searchsorted(pos_sorted, thr, side="left")
    predicted = p.size - np.searchsorted(all_sorted, thr, side="left")
    fp = predicted - tp
    fn = n_pos - tp
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, 2 * tp / np.maximum(den, 1), np.nan)


def select_threshold_max_f1(probs: Sequence, gts: Sequence,
                            grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Grid threshold maximising pooled Dice; ties go to the one nearest 0.5, lower first."""
    scores = sweep_dice(probs, gts, grid)
    scores = np.where(np.isnan(scores), -np.inf, scores)
    best = scores.max()
    candidates = [t for t, s in zip(grid, scores) if s == best]
    # rounded so that 0.49 and 0.51 count as equally near despite float error
    return min(candidates, key=lambda t: (round(abs(t - 0.5), 12), t))


def metrics_csv(values: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k in METRIC_ORDER:
        w.writerow([k, repr(float(values[k]))])
    return buf.getvalue()


def metrics_json(values: dict[str, float]) -> str:
    body = {k: (None if math.isnan(values[k]) else values[k]) for k in METRIC_ORDER}
    body["undefined"] = undefined_metrics(values)
    return json.dumps(body, indent=2)
