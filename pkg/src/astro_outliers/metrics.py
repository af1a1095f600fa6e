"""Confusion-matrix metrics, ROC/AUC and the outlier-fraction sweep.

The positive class is "outlier" throughout.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import MetricError
from .knn import round_half_up, top_m_flagged


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def trapezoid_area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


@dataclass
class MetricReport:
    auc: float
    recall: float
    precision: float
    f1: float
    accuracy: float
    wall_time: float = 0.0
    fraction: float = None
    n_flagged: int = None

    def to_dict(self):
        return asdict(self)


def _truth(truth):
    t = np.asarray(truth)
    if t.ndim != 1:
        raise MetricError("truth must be a 1-d array of outlier flags")
    return t.astype(bool)


def confusion(flagged, truth):
    truth = _truth(truth)
    n = len(truth)
    idx = np.asarray(list(flagged), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise MetricError(f"flagged index out of range for {n} samples")
    pred = np.zeros(n, dtype=bool)
    pred[idx] = True
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den):
    return num / den if den else 0.0


def prf_metrics(c):
    """Precision, recall, F1 and accuracy; zero denominators give 0.

    F1 uses the count form 2TP / (2TP + FP + FN), the harmonic mean of
    precision and recall without the extra rounding, so it equals both
    exactly when FP == FN.
    """
    if c.total <= 0:
        raise MetricError("confusion counts are empty")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    accuracy = (c.tp + c.tn) / c.total
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy}


def auc_rank(scores, truth):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    truth = _truth(truth)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one outlier and one inlier")
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, truth):
    """(FPR, TPR) at every distinct score threshold, descending, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=float)
    truth = _truth(truth)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs at least one outlier and one inlier")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tps = np.cumsum(t)[last_of_run]
    fps = np.cumsum(~t)[last_of_run]
    thresholds = s[last_of_run]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr, np.r_[np.inf, thresholds]


def roc_auc(scores, truth):
    fpr, tpr, thr = roc_curve(scores, truth)
    return RocCurve(fpr, tpr, thr, auc_rank(scores, truth))


def metric_report(scores, truth, flagged, wall_time=0.0, fraction=None, auc=None):
    if auc is None:
        auc = auc_rank(scores, truth)
    m = prf_metrics(confusion(flagged, truth))
    return MetricReport(auc=auc, wall_time=wall_time, fraction=fraction, n_flagged=len(flagged), **m)


def fraction_sweep(scores, truth, fractions):
    """Re-threshold fixed scores at each fraction; AUC is shared by all rows."""
    scores = np.asarray(scores, dtype=float)
    auc = auc_rank(scores, truth)
    reports = []
    for f in fractions:
        if not 0 < f < 1:
            raise MetricError(f"fraction {f} outside (0, 1)")
        flagged = top_m_flagged(scores, round_half_up(f * len(scores)))
        reports.append(metric_report(scores, truth, flagged, fraction=f, auc=auc))
    return reports


def write_roc(path, curve):
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for x, y in zip(curve.fpr, curve.tpr):
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_roc(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
