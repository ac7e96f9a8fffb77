"""
Evaluation metrics: accuracy with confusion counts, ROC curves and AUC,
vertical ROC averaging across folds, and paired / one-sample t-tests.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from errors import EmptyInputError, PrognosisError, SingleClassError

THRESHOLD = 0.5
FPR_GRID = np.arange(101) / 100.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score cut for each point after the origin
    auc: float

    def to_dict(self) -> dict:
        return {"fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(),
                "thresholds": self.thresholds.tolist(), "auc": self.auc}

    @classmethod
    def from_dict(cls, doc: dict) -> "RocCurve":
        return cls(np.asarray(doc["fpr"], dtype=np.float64), np.asarray(doc["tpr"], dtype=np.float64),
                   np.asarray(doc["thresholds"], dtype=np.float64), float(doc["auc"]))


@dataclass(frozen=True, eq=False)
class AverageRoc:
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    dof: int
    degenerate: bool
    description: str = ""

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "dof": self.dof,
                "degenerate": self.degenerate, "description": self.description}


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isin(y, (0, 1))):
        raise PrognosisError("Labels must be 0 or 1")
    return y


def confusion(scores, labels, threshold: float = THRESHOLD) -> ConfusionCounts:
    """Positive prediction iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.size == 0:
        raise EmptyInputError("Accuracy of an empty prediction set")
    if s.shape != y.shape:
        raise PrognosisError(f"{s.size} scores but {y.size} labels")
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (y == 1))),
        tn=int(np.sum(~pred & (y == 0))),
        fp=int(np.sum(pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def accuracy(scores, labels, threshold: float = THRESHOLD) -> Tuple[float, ConfusionCounts]:
    """(TP + TN) / (TP + TN + FP + FN) and the confusion counts behind it."""
    counts = confusion(scores, labels, threshold)
    return counts.accuracy, counts


def roc_and_auc(scores, labels) -> RocCurve:
    """
    Threshold sweep over the distinct scores, highest first; tied scores
    move together. The trapezoid area is accumulated in integers and
    divided once, which makes it equal the Mann-Whitney statistic with
    ties counted 1/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape:
        raise PrognosisError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs both positive and negative labels")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    last_of_group = np.append(np.flatnonzero(np.diff(s_sorted)), s.size - 1)
    tps = np.concatenate(([0], np.cumsum(y_sorted)[last_of_group]))
    fps = np.concatenate(([0], last_of_group + 1 - tps[1:]))

    twice_area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    auc = twice_area / (2.0 * n_pos * n_neg)
    return RocCurve(fps / n_neg, tps / n_pos, s_sorted[last_of_group], auc)


def interpolate_tpr(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation of TPR at each grid FPR; vertical segments take their upper TPR."""
    fpr, tpr = curve.fpr, curve.tpr
    out = np.empty(len(grid))
    for g_idx, g in enumerate(grid):
        k = int(np.searchsorted(fpr, g, side="right")) - 1
        if k < 0:
            out[g_idx] = tpr[0]
        elif fpr[k] == g or k == len(fpr) - 1:
            out[g_idx] = tpr[k]
        else:
            w = (g - fpr[k]) / (fpr[k + 1] - fpr[k])
            out[g_idx] = tpr[k] + w * (tpr[k + 1] - tpr[k])
    return out


def average_roc(curves: Sequence[RocCurve], grid: Optional[np.ndarray] = None) -> AverageRoc:
    """Vertical averaging: mean and population std of TPR at each grid FPR."""
    grid = FPR_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise EmptyInputError("ROC averaging grid is empty")
    if len(curves) < 2:
        raise EmptyInputError(f"ROC averaging needs at least 2 curves, got {len(curves)}")
    tprs = np.vstack([interpolate_tpr(c, grid) for c in curves])
    return AverageRoc(grid, tprs.mean(axis=0), tprs.std(axis=0))


def _t_test(d: np.ndarray, description: str) -> TTestResult:
    n = d.size
    if n < 2:
        raise EmptyInputError(f"t-test needs at least 2 observations, got {n}")
    mean = float(d.mean())
    if np.ptp(d) == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n - 1, True, description)
        return TTestResult(float(np.copysign(np.inf, mean)), 0.0, n - 1, True, description)
    se = float(d.std(ddof=1)) / np.sqrt(n)
    t = mean / se
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTestResult(float(t), min(p, 1.0), n - 1, False, description)


def paired_ttest(a, b, description: str = "") -> TTestResult:
    """Two-sided paired t-test on a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PrognosisError(f"Paired t-test needs equal lengths, got {a.size} and {b.size}")
    return _t_test(a - b, description)


def one_sample_ttest(x, mu0: float = 0.5, description: str = "") -> TTestResult:
    """Two-sided one-sample t-test of mean(x) against mu0."""
    return _t_test(np.asarray(x, dtype=np.float64) - mu0, description)
