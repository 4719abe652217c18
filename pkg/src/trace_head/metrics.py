"""Binary classification metrics (macro-averaged) and McNemar's paired test."""
from __future__ import annotations

import dataclasses
import math

import numpy as np


@dataclasses.dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float = 0.5

    @property
    def count(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int, threshold: float = 0.5) -> Metrics:
    """Macro averages over the positive and negative class.

    A class metric with a zero denominator counts as 0.
    """
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("no predictions to score")
    p_pos, r_pos = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    # the negative class sees the same table with roles swapped
    p_neg, r_neg = _ratio(tn, tn + fn), _ratio(tn, tn + fp)
    return Metrics(
        accuracy=(tp + tn) / total,
        precision=(p_pos + p_neg) / 2,
        recall=(r_pos + r_neg) / 2,
        f1=(_f1(p_pos, r_pos) + _f1(p_neg, r_neg)) / 2,
        tp=tp, fp=fp, fn=fn, tn=tn,
        threshold=threshold,
    )


def confusion_counts(y_true, y_pred) -> tuple[int, int, int, int]:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction shapes differ: {y_true.shape} vs {y_pred.shape}")
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    return tp, fp, fn, tn


def classification_metrics(y_true, y_pred, threshold: float = 0.5) -> Metrics:
    return metrics_from_counts(*confusion_counts(y_true, y_pred), threshold=threshold)


@dataclasses.dataclass
class ContingencyCounts:
    n10: int
    n01: int
    statistic: float
    p_value: float


def mcnemar(n10: int, n01: int) -> tuple[float, float]:
    """Continuity-corrected McNemar statistic and its chi-square(1) p-value.

    ``n10``: cases model 1 gets right and model 2 wrong; ``n01`` the reverse.
    """
    if n10 < 0 or n01 < 0 or int(n10) != n10 or int(n01) != n01:
        raise ValueError(f"counts must be non-negative integers, got {n10}, {n01}")
    if n10 + n01 == 0:
        raise ValueError("McNemar's test is undefined when there are no disagreements")
    stat = max(abs(n10 - n01) - 1, 0) ** 2 / (n10 + n01)
    return stat, math.erfc(math.sqrt(stat / 2.0))


def mcnemar_counts(y_true, pred_1, pred_2) -> ContingencyCounts:
    """Tabulate disagreements between two prediction vectors and test them."""
    y_true, pred_1, pred_2 = (np.asarray(a).astype(int) for a in (y_true, pred_1, pred_2))
    right_1, right_2 = pred_1 == y_true, pred_2 == y_true
    n10 = int(np.sum(right_1 & ~right_2))
    n01 = int(np.sum(~right_1 & right_2))
    stat, p = mcnemar(n10, n01)
    return ContingencyCounts(n10, n01, stat, p)
