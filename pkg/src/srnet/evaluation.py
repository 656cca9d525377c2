"""Registration metrics: (relative) target registration error, Dice, HD95, and a
paired Wilcoxon signed-rank test for comparing variants over the same seeds."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .clustering import LabelMap
from .errors import DegenerateSample, DimensionMismatch, EmptyMask, LengthMismatch
from .imaging import LandmarkSet

EXACT_WILCOXON_MAX_N = 25


class RTREResult(NamedTuple):
    tre: np.ndarray
    rtre: np.ndarray
    mean_tre: float
    median_tre: float
    mean_rtre: float
    median_rtre: float


def rtre(warped: LandmarkSet, target: LandmarkSet, w: int, h: int) -> RTREResult:
    """Per-landmark Euclidean error, and the same normalised by the image diagonal."""
    if len(warped) != len(target):
        raise LengthMismatch(f"landmark counts differ: {len(warped)} vs {len(target)}")
    if w <= 0 or h <= 0:
        raise ValueError("image dimensions must be positive")
    diff = warped.points - target.points
    tre = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
    rel = tre / math.sqrt(w * w + h * h)
    if tre.size == 0:
        nan = float("nan")
        return RTREResult(tre, rel, nan, nan, nan, nan)
    return RTREResult(tre, rel, float(tre.mean()), float(np.median(tre)),
                      float(rel.mean()), float(np.median(rel)))


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, LabelMap) else np.asarray(m)


def dice(a, b, class_id: int) -> float:
    """``2|A & B| / (|A| + |B|)`` for the pixels labelled ``class_id``; 1 when both are empty."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise DimensionMismatch(f"label maps differ in size: {la.shape} vs {lb.shape}")
    ma, mb = la == class_id, lb == class_id
    size = int(ma.sum()) + int(mb.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / size


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def boundary_distances(a, b, class_id: int) -> np.ndarray:
    """Symmetric set of nearest boundary-to-boundary distances, both directions concatenated."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise DimensionMismatch(f"label maps differ in size: {la.shape} vs {lb.shape}")
    ma, mb = la == class_id, lb == class_id
    if not ma.any() or not mb.any():
        raise EmptyMask(f"class {class_id} is empty in at least one mask")
    ba, bb = boundary(ma), boundary(mb)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    return np.concatenate([to_b[ba], to_a[bb]])


def hd95(a, b, class_id: int) -> float:
    """95th percentile (linear interpolation) of symmetric boundary distances, in pixels."""
    return float(np.percentile(boundary_distances(a, b, class_id), 95, method="linear"))


def hausdorff(a, b, class_id: int) -> float:
    return float(boundary_distances(a, b, class_id).max())


# ------------------------------------------------------------------ Wilcoxon


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of the doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def paired_wilcoxon(x, y) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Uses the exact null distribution (with
    average ranks for ties) when at most 25 non-zero differences remain,
    otherwise the normal approximation with tie-corrected variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("paired samples must be 1D and of equal length")
    if x.size < 6:
        raise DegenerateSample(f"need at least 6 pairs, got {x.size}")
    d = x - y
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateSample("all paired differences are zero")
    n = d.size
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        total = 2 ** n
        obs = int(round(2 * w_plus))
        lower = int(counts[: obs + 1].sum())
        upper = int(counts[obs:].sum())
        p = 2 * min(lower, upper) / total
        return float(min(1.0, p))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, math.erfc(abs(z) / math.sqrt(2.0))))


# ---------------------------------------------------------------- reporting


@dataclass
class MetricRecord:
    pair_id: str
    width: int
    height: int
    mean_tre: float
    median_tre: float
    mean_rtre: float
    median_rtre: float
    dice: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    landmark_rtre: list = field(default_factory=list)


def record_for(pair_id: str, warped: LandmarkSet, target: LandmarkSet, w: int, h: int) -> MetricRecord:
    r = rtre(warped, target, w, h)
    return MetricRecord(pair_id, w, h, r.mean_tre, r.median_tre, r.mean_rtre, r.median_rtre,
                        landmark_rtre=[float(v) for v in r.rtre])


@dataclass
class MetricReport:
    records: list[MetricRecord] = field(default_factory=list)

    def aggregate(self) -> dict:
        """Medians over pairs, plus the median over all pooled landmarks."""
        if not self.records:
            return {}
        agg = {
            "median_of_pair_median_rtre": float(np.median([r.median_rtre for r in self.records])),
            "median_of_pair_mean_rtre": float(np.median([r.mean_rtre for r in self.records])),
            "median_of_pair_median_tre": float(np.median([r.median_tre for r in self.records])),
        }
        pooled = [v for r in self.records for v in r.landmark_rtre]
        if pooled:
            agg["median_over_landmarks_rtre"] = float(np.median(pooled))
        classes = sorted({c for r in self.records for c in r.dice})
        for c in classes:
            vals = [r.dice[c] for r in self.records if c in r.dice]
            agg[f"median_dice_{c}"] = float(np.median(vals))
            hd = [r.hd95[c] for r in self.records if c in r.hd95]
            if hd:
                agg[f"median_hd95_{c}"] = float(np.median(hd))
        return agg

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records], "aggregate": self.aggregate()},
                          indent=2, sort_keys=True)

    def to_csv(self) -> str:
        classes = sorted({c for r in self.records for c in r.dice})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pair_id", "width", "height", "mean_tre", "median_tre", "mean_rtre", "median_rtre"]
                        + [f"dice_{c}" for c in classes] + [f"hd95_{c}" for c in classes])
        for r in self.records:
            writer.writerow([r.pair_id, r.width, r.height, r.mean_tre, r.median_tre, r.mean_rtre, r.median_rtre]
                            + [r.dice.get(c, "") for c in classes] + [r.hd95.get(c, "") for c in classes])
        return buf.getvalue()


def format_rtre_table(rows: dict[str, dict[str, float]], columns: list[str]) -> str:
    """Plain-text median-rTRE table: one row per group, one column per method."""
    width = max([len(r) for r in rows] + [5])
    cw = max([len(c) for c in columns] + [10])
    head = " " * width + " | " + " | ".join(f"{c:>{cw}}" for c in columns)
    lines = [head, "-" * len(head)]
    for name, vals in rows.items():
        cells = " | ".join(f"{vals[c]:{cw}.5f}" if c in vals else " " * cw for c in columns)
        lines.append(f"{name:<{width}} | {cells}")
    return "\n".join(lines) + "\n"
