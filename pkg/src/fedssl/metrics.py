"""Confusion-based classification metrics, ROC curve, and AUC.

Tie conventions, fixed and documented: a probability exactly equal to the
threshold predicts positive (>= rule), and tied scores across classes earn
0.5 credit in the AUC, which makes the trapezoidal curve integral equal the
pairwise Mann-Whitney statistic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

ROC_FIELDS = ["threshold", "fpr", "tpr"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class MetricValues:
    acc: float
    recall: float
    precision: float
    f1: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    """Everything reported for one evaluated classifier."""

    counts: ConfusionCounts
    values: MetricValues
    auc: float
    roc: list[RocPoint] = field(default_factory=list)

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ROC_FIELDS)
            for p in self.roc:
                writer.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with the >= threshold rule for predicting positive."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labs = np.asarray(labels)
    if probs.size == 0:
        raise ContractError("confusion needs at least one sample")
    if probs.shape != labs.shape:
        raise ContractError(f"probabilities {probs.shape} vs labels {labs.shape}")
    if not np.all((labs == 0) | (labs == 1)):
        raise ContractError("labels must be binary 0/1")
    pred = probs >= threshold
    pos = labs == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def metrics(counts: ConfusionCounts) -> MetricValues:
    """ACC, Recall, Precision, F1; zero-denominator cases return 0 and set
    the degeneracy flag."""
    if counts.total <= 0:
        raise ContractError("metrics needs at least one counted sample")
    degenerate = False

    def ratio(num: int, den: int) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    acc = (counts.tp + counts.tn) / counts.total
    recall = ratio(counts.tp, counts.tp + counts.fn)
    precision = ratio(counts.tp, counts.tp + counts.fp)
    f1 = ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    return MetricValues(acc, recall, precision, f1, degenerate)


def roc_points(probabilities, labels) -> list[RocPoint]:
    """Threshold sweep over the sorted unique scores, ties grouped.

    Starts at (inf, 0, 0); each unique score descending adds the operating
    point of the >= rule at that score; the final point is always (1, 1).
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labs = np.asarray(labels)
    if probs.size == 0 or probs.shape != labs.shape:
        raise ContractError("roc_points needs matching non-empty inputs")
    n_pos = int(np.sum(labs == 1))
    n_neg = int(np.sum(labs == 0))
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_points needs both classes present")
    points = [RocPoint(np.inf, 0.0, 0.0)]
    for t in np.unique(probs)[::-1]:
        pred = probs >= t
        tp = int(np.sum(pred & (labs == 1)))
        fp = int(np.sum(pred & (labs == 0)))
        points.append(RocPoint(float(t), fp / n_neg, tp / n_pos))
    return points


def auc(curve: list[RocPoint]) -> float:
    """Trapezoidal area under an ROC point list sorted by FPR."""
    if len(curve) < 2:
        raise ContractError("auc needs at least two curve points")
    area = 0.0
    for a, b in zip(curve, curve[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return area


def evaluate(probabilities, labels, threshold: float = 0.5) -> MetricsReport:
    counts = confusion(probabilities, labels, threshold)
    curve = roc_points(probabilities, labels)
    return MetricsReport(counts=counts, values=metrics(counts),
                         auc=auc(curve), roc=curve)
