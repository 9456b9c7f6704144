"""Region similarity J, boundary F-measure and per-sequence statistics."""
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import ndimage

from imcnet.errors import ShapeError

BOUNDARY_TOL_FRACTION = 0.008
RECALL_THRESHOLD = 0.5
_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt, what):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"{what}: need equal 2-D masks, got {pred.shape} and {gt.shape}")
    return pred, gt


def region_j(pred, gt):
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _pair(pred, gt, "region_j")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_map(mask):
    """Foreground pixels with a 4-neighbour in the background.

    Pixels beyond the image border are not background, so a mask touching
    the border has no boundary there.
    """
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=1)


def default_tolerance(shape):
    return math.ceil(BOUNDARY_TOL_FRACTION * math.hypot(*shape))


def disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= radius ** 2


def boundary_f(pred, gt, tolerance=None):
    """F-measure of boundary pixels matched within ``tolerance`` pixels (Euclidean)."""
    pred, gt = _pair(pred, gt, "boundary_f")
    tol = default_tolerance(pred.shape) if tolerance is None else tolerance
    pb, gb = boundary_map(pred), boundary_map(gt)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    fp = disk(tol)
    precision = np.count_nonzero(pb & ndimage.binary_dilation(gb, structure=fp)) / n_p
    recall = np.count_nonzero(gb & ndimage.binary_dilation(pb, structure=fp)) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class Stats:
    mean: float
    recall: float
    decay: float


def statistics(scores):
    """Mean, recall (fraction > 0.5) and decay (first- minus last-quartile mean)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no per-frame scores to aggregate")
    decay = 0.0
    if s.size >= 4:
        quarters = np.array_split(s, 4)
        decay = float(quarters[0].mean() - quarters[-1].mean())
    return Stats(float(s.mean()), float(np.mean(s > RECALL_THRESHOLD)), decay)


@dataclass
class SequenceScore:
    name: str
    j: List[float]
    f: List[float]
    j_stats: Stats = field(init=False)
    f_stats: Stats = field(init=False)

    def __post_init__(self):
        self.j_stats = statistics(self.j)
        self.f_stats = statistics(self.f)

    @property
    def jf_mean(self):
        return (self.j_stats.mean + self.f_stats.mean) / 2

    def record(self):
        return {"sequence": self.name, "frames": len(self.j),
                "J_mean": self.j_stats.mean, "J_recall": self.j_stats.recall, "J_decay": self.j_stats.decay,
                "F_mean": self.f_stats.mean, "F_recall": self.f_stats.recall, "F_decay": self.f_stats.decay,
                "JF_mean": self.jf_mean, "J": list(self.j), "F": list(self.f)}


def score_sequence(name, preds, gts, tolerance=None):
    if len(preds) != len(gts) or not preds:
        raise ShapeError(f"sequence {name}: {len(preds)} predictions for {len(gts)} ground-truth masks")
    return SequenceScore(name, [region_j(p, g) for p, g in zip(preds, gts)],
                         [boundary_f(p, g, tolerance) for p, g in zip(preds, gts)])


def aggregate(sequences) -> Dict[str, float]:
    """Dataset-level means over sequences of each per-sequence statistic."""
    if not sequences:
        raise ValueError("no sequences to aggregate")
    keys = ("J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay")
    recs = [s.record() for s in sequences]
    out = {k: float(np.mean([r[k] for r in recs])) for k in keys}
    out["JF_mean"] = (out["J_mean"] + out["F_mean"]) / 2
    out["sequences"] = len(sequences)
    return out
