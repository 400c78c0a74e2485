"""Overlap and confusion metrics for binary masks and regional proposals.

Conventions used throughout:

* a mask is a 2-D boolean array; two empty masks have IOU 1.0 (perfect
  agreement that nothing is present),
* variance is the population variance (divide by n),
* variance-over-mean statistics use +inf as a sentinel when the mean is
  zero or the pixel set is empty; +inf compares greater than any finite
  threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"mask dimensions differ: {sorted(shapes)}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union (Jaccard coefficient) of two boolean masks."""
    _check_same_shape(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass(frozen=True)
class Confusion:
    """Pixel counts of a prediction against a target, restricted to a region.

    The derived rates resolve 0/0 to 1.0 (vacuous success): a blank target
    matched by a blank prediction is exact agreement, not a failure.
    """

    tp: int
    fp: int
    fn: int
    tn: int

    @staticmethod
    def _rate(num: int, den: int) -> float:
        return num / den if den else 1.0

    @property
    def dc(self) -> float:
        return self._rate(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def iou(self) -> float:
        return self._rate(self.tp, self.tp + self.fp + self.fn)

    @property
    def sen(self) -> float:
        return self._rate(self.tp, self.tp + self.fn)

    @property
    def spec(self) -> float:
        return self._rate(self.tn, self.tn + self.fp)

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.fn + self.tn)

    def as_dict(self) -> dict[str, float]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "dc": self.dc,
            "iou": self.iou,
            "sen": self.sen,
            "spec": self.spec,
            "acc": self.acc,
        }


def confusion(pred: np.ndarray, target: np.ndarray, roi: np.ndarray) -> Confusion:
    """Pixel confusion counts of pred vs target, counted inside roi only."""
    _check_same_shape(pred, target, roi)
    roi = roi.astype(bool)
    if not roi.any():
        raise ValueError("confusion undefined on an empty roi")
    p = pred.astype(bool)[roi]
    t = target.astype(bool)[roi]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return Confusion(tp=tp, fp=fp, fn=fn, tn=tn)


def dc_loss(pred_prob: np.ndarray, target: np.ndarray) -> float:
    """Soft dice loss summed over pixels: sum_k (1 - 2*p*y / (p + y + 1))."""
    _check_same_shape(pred_prob, target)
    p = np.asarray(pred_prob, dtype=float)
    y = target.astype(float)
    return float(np.sum(1.0 - 2.0 * p * y / (p + y + 1.0)))


def variance_over_mean(values: np.ndarray) -> float:
    """Population variance divided by mean; +inf for empty input or zero mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.inf
    mean = float(values.mean())
    if mean == 0.0:
        return math.inf
    return float(values.var()) / mean


@dataclass(frozen=True)
class OverlapReport:
    """Agreement statistics between three regional proposals and two labels.

    iou_pairwise: IOUs of (P1,P2), (P1,P3), (P2,P3).
    phi_pi:       variance-over-mean of the pairwise IOUs; high values mean
                  the proposals disagree with each other.
    mu_iou:       per-label mean IOU of the proposals against that label.
    psi_star:     per-label 1-based index of the best-overlapping proposal.
    phi:          per-label variance-over-mean of image intensity restricted
                  to the label intersected with the proposal union.
    """

    iou_pairwise: tuple[float, float, float]
    phi_pi: float
    mu_iou: tuple[float, float]
    psi_star: tuple[int, int]
    phi: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "iou_pairwise": list(self.iou_pairwise),
            "phi_pi": self.phi_pi,
            "mu_iou": list(self.mu_iou),
            "psi_star": list(self.psi_star),
            "phi": list(self.phi),
        }


def overlap_report(
    proposals: tuple[np.ndarray, np.ndarray, np.ndarray],
    t1: np.ndarray,
    t2: np.ndarray,
    img: np.ndarray,
) -> OverlapReport:
    """Compute all relative-agreement statistics for one image."""
    p1, p2, p3 = proposals
    _check_same_shape(p1, p2, p3, t1, t2, img)

    pairwise = (iou(p1, p2), iou(p1, p3), iou(p2, p3))
    phi_pi = variance_over_mean(np.array(pairwise))

    rp_union = p1.astype(bool) | p2.astype(bool) | p3.astype(bool)
    mu = []
    psi = []
    phi = []
    for t in (t1, t2):
        overlaps = [iou(p, t) for p in (p1, p2, p3)]
        mu.append(float(np.mean(overlaps)))
        psi.append(int(np.argmax(overlaps)) + 1)
        sub = np.asarray(img, dtype=float) * t.astype(float) * rp_union.astype(float)
        phi.append(variance_over_mean(sub[sub > 0]))

    return OverlapReport(
        iou_pairwise=pairwise,
        phi_pi=phi_pi,
        mu_iou=(mu[0], mu[1]),
        psi_star=(psi[0], psi[1]),
        phi=(phi[0], phi[1]),
    )


def jsonable(value):
    """Recursively convert a structure to JSON-safe types.

    Non-finite floats become the strings "inf", "-inf" or "nan" so the output
    stays valid JSON.
    """
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        f = float(value)
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        if math.isnan(f):
            return "nan"
        return f
    if isinstance(value, np.integer):
        return int(value)
    return value
