"""Accuracy, per-class precision/recall/F1 and support-weighted F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    per_class: list[ClassScores]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class": [vars(c) for c in self.per_class],
            "confusion": self.confusion,
        }


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions differ in length")
    for arr in (labels, preds):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"class index outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def compute_metrics(labels, preds, num_classes: int) -> MetricsReport:
    cm = confusion_matrix(labels, preds, num_classes)
    total = int(cm.sum())
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    per_class = []
    for c in range(num_classes):
        prec = tp[c] / predicted[c] if predicted[c] else 0.0
        rec = tp[c] / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class.append(ClassScores(float(prec), float(rec), float(f1), int(support[c])))
    weighted = (sum(s.support * s.f1 for s in per_class) / total) if total else 0.0
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        weighted_f1=float(weighted),
        per_class=per_class,
        confusion=cm.tolist(),
    )
