"""Confusion-matrix metrics with apneic (1) as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError


@dataclass
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    sensitivity: Optional[float]  # None when there are no positives
    specificity: Optional[float]  # None when there are no negatives

    @property
    def count(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        def pct(x):
            return "n/a" if x is None else f"{100 * x:.2f}%"
        return (f"accuracy {pct(self.accuracy)}  sensitivity {pct(self.sensitivity)}  "
                f"specificity {pct(self.specificity)}  (TP {self.tp} TN {self.tn} FP {self.fp} FN {self.fn})")


def evaluate_metrics(predictions, labels) -> MetricsReport:
    p = np.asarray(predictions).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if p.shape != y.shape:
        raise ParameterError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise ParameterError("no predictions to evaluate")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return MetricsReport(
        tp, tn, fp, fn,
        accuracy=(tp + tn) / p.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
    )
