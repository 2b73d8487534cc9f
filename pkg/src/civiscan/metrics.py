"""Evaluation arithmetic: confusion matrices, per-class P/R/F1, efficiency gain.

Degenerate 0/0 rates are defined as 0 and flagged rather than silently
dropped. Display rounding is half-up to integer percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    k: int
    counts: np.ndarray  # (k, k) ints; rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassReport:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


@dataclass
class ClassificationReport:
    accuracy: float
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": [
                {
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                    "degenerate": c.degenerate,
                }
                for c in self.per_class
            ],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def confusion_matrix(truths, preds, k: int) -> ConfusionMatrix:
    truths = list(truths)
    preds = list(preds)
    if len(truths) != len(preds):
        raise MetricsError(f"length mismatch: {len(truths)} truths vs {len(preds)} predictions")
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truths, preds):
        t, p = int(t), int(p)
        if not (0 <= t < k and 0 <= p < k):
            raise MetricsError(f"label outside [0, {k}): truth={t} pred={p}")
        counts[t, p] += 1
    return ConfusionMatrix(k, counts)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    total = cm.total
    if total == 0:
        raise MetricsError("cannot report on an empty evaluation")
    counts = cm.counts
    accuracy = float(np.trace(counts)) / total
    per_class = []
    for c in range(cm.k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        degenerate = False
        if tp + fp == 0:
            precision, degenerate = 0.0, True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall, degenerate = 0.0, True
        else:
            recall = tp / (tp + fn)
        per_class.append(
            ClassReport(precision, recall, f1_score(precision, recall), support=tp + fn, degenerate=degenerate)
        )
    return ClassificationReport(
        accuracy=accuracy,
        per_class=per_class,
        macro_precision=sum(c.precision for c in per_class) / cm.k,
        macro_recall=sum(c.recall for c in per_class) / cm.k,
        macro_f1=sum(c.f1 for c in per_class) / cm.k,
    )


def percent_display(rate: float) -> int:
    """Round-half-up to integer percent: 0.90497 -> 90, 0.905 -> 91."""
    return int(math.floor(rate * 100.0 + 0.5))


def efficiency_gain(manual_seconds: float, automated_seconds: float) -> float:
    """Fraction of manual handling time eliminated by automation."""
    if manual_seconds <= 0:
        raise MetricsError(f"manual_seconds must be > 0, got {manual_seconds}")
    if automated_seconds < 0:
        raise MetricsError(f"automated_seconds must be >= 0, got {automated_seconds}")
    if automated_seconds > manual_seconds:
        raise MetricsError(
            f"automation slower than manual baseline ({automated_seconds}s > {manual_seconds}s): negative gain"
        )
    return (manual_seconds - automated_seconds) / manual_seconds


def format_report_table(report: ClassificationReport, class_names) -> str:
    lines = [
        f"accuracy: {report.accuracy:.4f}",
        f"{'class':<28}{'precision%':>11}{'recall%':>9}{'f1%':>6}{'support':>9}",
    ]
    for name, c in zip(class_names, report.per_class):
        flag = " *" if c.degenerate else ""
        lines.append(
            f"{name:<28}{percent_display(c.precision):>11}{percent_display(c.recall):>9}"
            f"{percent_display(c.f1):>6}{c.support:>9}{flag}"
        )
    lines.append(
        f"{'macro':<28}{percent_display(report.macro_precision):>11}"
        f"{percent_display(report.macro_recall):>9}{percent_display(report.macro_f1):>6}"
    )
    return "\n".join(lines)
