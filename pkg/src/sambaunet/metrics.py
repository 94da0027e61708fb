"""Overlap, confusion and boundary-distance segmentation metrics.

Boundary pixels are class pixels with at least one 4-neighbour outside the
class (the image border counts as outside). HD95 is the 95th percentile,
with linear interpolation, of the pooled directed boundary distances in both
directions; ASD is their mean.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError

FOREGROUND = (1, 2, 3)
CLASS_NAMES = {0: "BG", 1: "RV", 2: "MYO", 3: "LV"}
# column order of the ablation tables
TABLE_COLUMNS = ("mDice", "mIoU", "Acc", "Pre", "Sen", "Spe", "mHD95", "ASD")


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction extent {pred.shape} != ground truth {gt.shape}")


def overlap_metrics(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[float, float]:
    """Dice and IoU for one class; both are 1 when the class is absent from both masks."""
    _check(pred, gt)
    p, g = pred == cls, gt == cls
    inter = int(np.count_nonzero(p & g))
    sp, sg = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    if sp + sg == 0:
        return 1.0, 1.0
    union = sp + sg - inter
    return 2.0 * inter / (sp + sg), inter / union


def _ratio(num: int, den: int) -> float:
    # empty population: nothing to get wrong
    return num / den if den else 1.0


def confusion_metrics(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[float, float, float, float]:
    """One-vs-rest (accuracy, precision, sensitivity, specificity)."""
    _check(pred, gt)
    p, g = pred == cls, gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return (
        _ratio(tp + tn, tp + tn + fp + fn),
        _ratio(tp, tp + fp),
        _ratio(tp, tp + fn),
        _ratio(tn, tn + fp),
    )


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it."""
    mask = mask.astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def surface_distances(pred: np.ndarray, gt: np.ndarray, cls: int) -> np.ndarray | None:
    """Pooled directed boundary distances in pixels.

    Returns an empty array when both boundaries are empty and ``None`` when
    exactly one side is empty.
    """
    _check(pred, gt)
    bp, bg = boundary(pred == cls), boundary(gt == cls)
    has_p, has_g = bp.any(), bg.any()
    if not has_p and not has_g:
        return np.zeros(0)
    if has_p != has_g:
        return None
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_g[bp], to_p[bg]])


def hd95(pred: np.ndarray, gt: np.ndarray, cls: int, spacing: float = 1.0) -> float:
    d = surface_distances(pred, gt, cls)
    if d is None:
        return math.inf
    if d.size == 0:
        return 0.0
    return float(np.percentile(d, 95)) * spacing


def asd(pred: np.ndarray, gt: np.ndarray, cls: int, spacing: float = 1.0) -> float:
    d = surface_distances(pred, gt, cls)
    if d is None:
        return math.inf
    if d.size == 0:
        return 0.0
    return float(d.mean()) * spacing


@dataclass
class MetricReport:
    """Per-class metrics for one sample (or an aggregate over samples)."""

    dice: dict = field(default_factory=dict)
    iou: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    asd: dict = field(default_factory=dict)
    acc: dict = field(default_factory=dict)
    pre: dict = field(default_factory=dict)
    sen: dict = field(default_factory=dict)
    spe: dict = field(default_factory=dict)
    conventions: tuple = ("empty-empty overlap = 1", "empty population ratio = 1",
                          "one-sided empty boundary distance = undefined (inf)")

    @staticmethod
    def _mean(values: dict) -> float:
        finite = [v for v in values.values() if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    def summary(self) -> dict:
        """Means over foreground classes in table column order."""
        return {
            "mDice": self._mean(self.dice),
            "mIoU": self._mean(self.iou),
            "Acc": self._mean(self.acc),
            "Pre": self._mean(self.pre),
            "Sen": self._mean(self.sen),
            "Spe": self._mean(self.spe),
            "mHD95": self._mean(self.hd95),
            "ASD": self._mean(self.asd),
        }

    @property
    def mdice(self) -> float:
        return self._mean(self.dice)


def evaluate_masks(pred: np.ndarray, gt: np.ndarray, spacing: float = 1.0,
                   classes: Sequence[int] = FOREGROUND) -> MetricReport:
    rep = MetricReport()
    for c in classes:
        rep.dice[c], rep.iou[c] = overlap_metrics(pred, gt, c)
        rep.acc[c], rep.pre[c], rep.sen[c], rep.spe[c] = confusion_metrics(pred, gt, c)
        rep.hd95[c] = hd95(pred, gt, c, spacing)
        rep.asd[c] = asd(pred, gt, c, spacing)
    return rep


def aggregate(reports: Iterable[MetricReport]) -> MetricReport:
    """Per-class means over samples; infinite distances are skipped."""
    reports = list(reports)
    out = MetricReport()
    for name in ("dice", "iou", "hd95", "asd", "acc", "pre", "sen", "spe"):
        classes = getattr(reports[0], name).keys()
        agg = getattr(out, name)
        for c in classes:
            vals = [getattr(r, name)[c] for r in reports]
            finite = [v for v in vals if math.isfinite(v)]
            agg[c] = float(np.mean(finite)) if finite else math.inf
    return out


def _fmt(v: float) -> str:
    return f"{v:.6f}" if math.isfinite(v) else "undefined"


def csv_header(classes: Sequence[int] = FOREGROUND) -> list[str]:
    cols = ["sample", *TABLE_COLUMNS]
    for c in classes:
        n = CLASS_NAMES[c]
        cols += [f"Dice_{n}", f"IoU_{n}", f"HD95_{n}", f"ASD_{n}"]
    return cols


def write_csv(path, reports: Sequence[MetricReport], classes: Sequence[int] = FOREGROUND) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(csv_header(classes))
        for i, r in enumerate(reports):
            s = r.summary()
            row = [i] + [_fmt(s[k]) for k in TABLE_COLUMNS]
            for c in classes:
                row += [_fmt(r.dice[c]), _fmt(r.iou[c]), _fmt(r.hd95[c]), _fmt(r.asd[c])]
            w.writerow(row)


def summary_json(reports: Sequence[MetricReport], extra: dict | None = None) -> dict:
    agg = aggregate(reports)
    undefined = sum(
        1 for r in reports for v in list(r.hd95.values()) + list(r.asd.values()) if not math.isfinite(v)
    )
    out = {
        "samples": len(reports),
        "means": {k: (v if math.isfinite(v) else "undefined") for k, v in agg.summary().items()},
        "per_class": {
            CLASS_NAMES[c]: {
                "Dice": agg.dice[c], "IoU": agg.iou[c],
                "HD95": agg.hd95[c] if math.isfinite(agg.hd95[c]) else "undefined",
                "ASD": agg.asd[c] if math.isfinite(agg.asd[c]) else "undefined",
            }
            for c in agg.dice
        },
        "undefined_distances": undefined,
        "conventions": list(MetricReport().conventions),
    }
    if extra:
        out.update(extra)
    return out


def write_json(path, reports: Sequence[MetricReport], extra: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(summary_json(reports, extra), f, indent=2)
