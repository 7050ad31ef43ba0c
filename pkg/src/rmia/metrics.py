"""Ranking and thresholded classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class DegenerateLabels(ValueError):
    pass


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum.

    Ties get half credit.  Computed from integer tie-group counts so the
    result equals the pairwise count divided by ``n_pos * n_neg`` exactly.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # group boundaries of equal scores
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    pos_in_group = np.add.reduceat(y_sorted, starts)
    neg_in_group = np.diff(np.r_[starts, y.size]) - pos_in_group
    neg_below = np.cumsum(neg_in_group) - neg_in_group
    # twice the pair count keeps everything integral
    twice = int((pos_in_group * (2 * neg_below + neg_in_group)).sum())
    return twice / (2 * n_pos * n_neg)


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: fraction of positive/negative pairs ordered correctly."""
    s, y = _as_arrays(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels("need both classes")
    twice = 0
    for p in pos:
        twice += 2 * int((p > neg).sum()) + int((p == neg).sum())
    return twice / (2 * pos.size * neg.size)


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    n: int
    positives: int
    precision_undefined: bool = False
    recall_undefined: bool = False
    auc_undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(a: int, b: int) -> tuple[float, bool]:
    return (0.0, True) if b == 0 else (a / b, False)


def classification_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ValueError("classification_metrics needs at least one instance")
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    precision, p_flag = _safe_div(tp, tp + fp)
    recall, r_flag = _safe_div(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    try:
        a, a_flag = auc(s, y), False
    except DegenerateLabels:
        a, a_flag = 0.5, True
    return MetricsReport(a, precision, recall, f1, float(threshold), int(s.size), int(y.sum()), p_flag, r_flag, a_flag)
