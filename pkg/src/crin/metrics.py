"""Evaluation metrics with global (micro) confusion accumulation: precision,
recall, F1, and IoU per task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricValues:
    precision: float
    recall: float
    f1: float
    iou: float
    degenerate: bool = False  # some 0/0 ratio was defined as 0


def confusion_update(counts: ConfusionCounts, prob: np.ndarray,
                     target: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize ``prob >= threshold`` and add per-pixel counts to the totals."""
    prob = np.asarray(prob)
    target = np.asarray(target)
    if prob.shape != target.shape:
        raise ShapeError(f"confusion_update: prob shape {prob.shape} does not "
                         f"match target shape {target.shape}")
    pred = prob >= threshold
    pos = target >= 0.5
    counts.tp += int(np.count_nonzero(pred & pos))
    counts.fp += int(np.count_nonzero(pred & ~pos))
    counts.fn += int(np.count_nonzero(~pred & pos))
    counts.tn += int(np.count_nonzero(~pred & ~pos))
    return counts


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics_compute(counts: ConfusionCounts) -> MetricValues:
    """Precision, recall, F1, IoU from accumulated counts; 0/0 is defined as 0
    and flagged as degenerate."""
    precision, d1 = _ratio(counts.tp, counts.tp + counts.fp)
    recall, d2 = _ratio(counts.tp, counts.tp + counts.fn)
    if precision + recall > 0:
        f1, d3 = 2 * precision * recall / (precision + recall), False
    else:
        f1, d3 = 0.0, True
    iou, d4 = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    return MetricValues(precision, recall, f1, iou,
                        degenerate=d1 or d2 or d3 or d4)


def metrics_csv(rows: dict[str, MetricValues]) -> str:
    """Rows of (task, iou, precision, recall, f1) in percent, 2 decimals."""
    lines = ["task,iou,precision,recall,f1"]
    for task, m in rows.items():
        lines.append(f"{task},{100 * m.iou:.2f},{100 * m.precision:.2f},"
                     f"{100 * m.recall:.2f},{100 * m.f1:.2f}")
    return "\n".join(lines) + "\n"


def metrics_table(rows: dict[str, MetricValues]) -> str:
    """Human-readable metrics block (percent, 2 decimals)."""
    lines = [f"{'Task':<10}{'IoU':>8}{'Precision':>11}{'Recall':>8}{'F1':>8}"]
    for task, m in rows.items():
        lines.append(f"{task:<10}{100 * m.iou:>8.2f}{100 * m.precision:>11.2f}"
                     f"{100 * m.recall:>8.2f}{100 * m.f1:>8.2f}")
    return "\n".join(lines)
