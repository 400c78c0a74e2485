"""Global-thresholding few-shot model driven by an ROC grid search.

Fitting sweeps the structuring-element bound s_d over {3,5,..,25} and a
threshold grid {0, 0.05, .., 1.0}, pooling pixel counts inside the ROI over
all training pairs. The s_d with the largest AUC wins (ties to the smaller,
cheaper element); the operating threshold is the grid point closest to the
ideal (FPR, TPR) = (0, 1) corner. Prediction thresholds the bottom-hat plane
at theta and at theta +/- 0.05 to produce three nested proposals.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import PreprocessedPlanes, bottom_hat

S_D_GRID = tuple(range(3, 26, 2))
THRESHOLD_GRID = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 2))
THETA_STEP = 0.05


@dataclass(frozen=True)
class RegionalProposals:
    """Ordered triple of proposal masks for one image."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        if not (self.p1.shape == self.p2.shape == self.p3.shape):
            raise ValueError("proposal masks must share dimensions")

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.p1, self.p2, self.p3)


@dataclass
class BaselineModel:
    s_d: int
    theta: float
    auc: float
    roc: list[tuple[float, float, float]]  # (fpr, tpr, threshold), sorted by threshold

    def to_json(self) -> str:
        return json.dumps(
            {
                "s_d": self.s_d,
                "theta": self.theta,
                "auc": self.auc,
                "roc": [list(point) for point in self.roc],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BaselineModel":
        data = json.loads(text)
        return cls(
            s_d=int(data["s_d"]),
            theta=float(data["theta"]),
            auc=float(data["auc"]),
            roc=[tuple(point) for point in data["roc"]],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "BaselineModel":
        return cls.from_json(Path(path).read_text())


def _roc_auc(points: list[tuple[float, float, float]]) -> float:
    """Trapezoidal AUC over the ROC points, anchored at (0,0) and (1,1)."""
    fprs = [0.0] + [p[0] for p in points] + [1.0]
    tprs = [0.0] + [p[1] for p in points] + [1.0]
    order = np.lexsort((tprs, fprs))
    f = np.asarray(fprs)[order]
    t = np.asarray(tprs)[order]
    return float(np.trapezoid(t, f))


def _roc_for_sd(
    train: list[tuple[PreprocessedPlanes, np.ndarray]], s_d: int
) -> list[tuple[float, float, float]]:
    """Pooled ROC over all training pairs at one structuring-element bound."""
    responses = []
    positives = []
    for planes, target in train:
        roi = planes.roi.astype(bool)
        ib = bottom_hat(planes.base, s_d)
        responses.append(ib[roi])
        positives.append(target.astype(bool)[roi])
    scores = np.concatenate(responses) if responses else np.array([])
    truth = np.concatenate(positives) if positives else np.array([], dtype=bool)
    n_pos = int(np.count_nonzero(truth))
    n_neg = truth.size - n_pos
    if n_pos == 0:
        raise ValueError("ROC undefined: no positive target pixels inside the ROI")
    if n_neg == 0:
        raise ValueError("ROC undefined: no negative target pixels inside the ROI")

    points = []
    for theta in THRESHOLD_GRID:
        pred = scores > theta
        tpr = np.count_nonzero(pred & truth) / n_pos
        fpr = np.count_nonzero(pred & ~truth) / n_neg
        points.append((float(fpr), float(tpr), float(theta)))
    return points


def fit_baseline(train: list[tuple[PreprocessedPlanes, np.ndarray]]) -> BaselineModel:
    """Grid-search s_d and theta on one or more (planes, target) pairs."""
    if not train:
        raise ValueError("need at least one training pair")

    best: BaselineModel | None = None
    for s_d in S_D_GRID:
        roc = _roc_for_sd(train, s_d)
        auc = _roc_auc(roc)
        if best is None or auc > best.auc:
            # operating point: grid threshold nearest to (fpr, tpr) = (0, 1)
            distances = [math.hypot(fpr, 1.0 - tpr) for fpr, tpr, _ in roc]
            theta = roc[int(np.argmin(distances))][2]
            best = BaselineModel(s_d=s_d, theta=theta, auc=auc, roc=roc)
    assert best is not None
    return best


def predict_baseline(model: BaselineModel, planes: PreprocessedPlanes) -> RegionalProposals:
    """Threshold the bottom-hat response at theta -/+ 0.05, inside the ROI."""
    roi = planes.roi.astype(bool)
    ib = bottom_hat(planes.base, model.s_d)
    thresholds = [
        min(max(model.theta - THETA_STEP, 0.0), 1.0),
        model.theta,
        min(max(model.theta + THETA_STEP, 0.0), 1.0),
    ]
    masks = [(ib > theta) & roi for theta in thresholds]
    return RegionalProposals(p1=masks[0], p2=masks[1], p3=masks[2])
