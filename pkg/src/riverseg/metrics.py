"""Pixel-accuracy metrics and the single-threshold NDWI baseline.

Aggregate scores pool pixel counts across images (micro-average);
per-image F1 lists feed :func:`summarize` for distribution-style
reporting.  All 0/0 ratios resolve to 0 so empty predictions score 0
precision rather than blowing up.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .labels import WATER_CUTOFF, ndwi, pick_ndwi_bands

__all__ = [
    "ConfusionCounts",
    "ScoreSummary",
    "confusion",
    "prf1",
    "optimize_ndwi_threshold",
    "summarize",
    "metrics_csv",
]


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level confusion counts for the water class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ArgumentError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_bool(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != np.bool_:
        a = a != 0
    return a


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Exact confusion counts between two binary masks of equal shape."""
    pred = _as_bool(pred)
    truth = _as_bool(truth)
    if pred.shape != truth.shape:
        raise ArgumentError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, F1) with the 0/0 -> 0 convention."""
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def optimize_ndwi_threshold(records, step: float = 0.01) -> float:
    """Best single NDWI threshold over a record split.

    Sweeps a uniform grid over [-1, 1], predicting water where
    ``ndwi >= t``, and maximises the pooled F1.  The maximising grid
    points always form one or more runs; the longest first run is read as
    the half-open interval ``(first - step, last]`` and its midpoint is
    returned, which centres the choice inside flat optima.
    """
    n_steps = int(round(2.0 / step))
    thresholds = np.round(np.arange(-n_steps // 2, n_steps // 2 + 1) * step, 10)
    water_hist = np.zeros(len(thresholds) + 1, dtype=np.int64)
    land_hist = np.zeros(len(thresholds) + 1, dtype=np.int64)
    n_water = 0
    n_land = 0
    for rec in records:
        green, nir, _ = pick_ndwi_bands(rec.image)
        values = ndwi(green, nir).ravel()
        is_water = (rec.label.values >= WATER_CUTOFF).ravel()
        # idx = number of grid thresholds <= value; suffix sums then give
        # the count of pixels at or above each threshold.
        idx = np.searchsorted(thresholds, values, side="right")
        water_hist += np.bincount(idx[is_water], minlength=len(water_hist))
        land_hist += np.bincount(idx[~is_water], minlength=len(land_hist))
        n_water += int(np.count_nonzero(is_water))
        n_land += is_water.size - int(np.count_nonzero(is_water))
    if n_water == 0:
        raise ArgumentError("no water pixels in split; threshold undefined")
    tp = np.cumsum(water_hist[::-1])[::-1][1:]
    fp = np.cumsum(land_hist[::-1])[::-1][1:]
    fn = n_water - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    best = f1.max()
    winners = np.flatnonzero(f1 >= best - 1e-12)
    # first contiguous run of winners
    first = winners[0]
    last = first
    for k in winners[1:]:
        if k == last + 1:
            last = k
        else:
            break
    lo = thresholds[first] - step
    hi = thresholds[last]
    return float((lo + hi) / 2.0)


@dataclass(frozen=True)
class ScoreSummary:
    """Distribution summary of per-image F1 scores.

    Quartiles use linear interpolation between order statistics (the
    numpy default), e.g. the median of [0.6, 0.7, 0.8, 0.9] is 0.75.
    """

    scores: tuple[float, ...]
    median: float
    lower_quartile: float
    upper_quartile: float
    mean: float


def summarize(per_image_f1) -> ScoreSummary:
    scores = tuple(float(s) for s in per_image_f1)
    if not scores:
        raise ArgumentError("cannot summarize an empty score list")
    arr = np.asarray(scores, dtype=np.float64)
    q25, q50, q75 = np.percentile(arr, [25, 50, 75])
    return ScoreSummary(scores, float(q50), float(q25), float(q75), float(arr.mean()))


def metrics_csv(per_image: list[tuple[str, ConfusionCounts]]) -> str:
    """CSV report: one row per image plus a pooled row.

    Columns: image_id, tp, fp, fn, tn, precision, recall, f1.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["image_id", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])
    pooled = ConfusionCounts()
    for image_id, c in per_image:
        p, r, f1 = prf1(c)
        writer.writerow([image_id, c.tp, c.fp, c.fn, c.tn,
                         f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}"])
        pooled = pooled + c
    p, r, f1 = prf1(pooled)
    writer.writerow(["pooled", pooled.tp, pooled.fp, pooled.fn, pooled.tn,
                     f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}"])
    return out.getvalue()
