"""Classification metrics: confusion matrix, accuracy, macro-F1.

Everything derives from the confusion matrix so the reported scalars can
always be recomputed and cross-checked from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(
    true: np.ndarray, pred: np.ndarray, n_classes: int
) -> np.ndarray:
    """Counts with true labels on rows and predictions on columns."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError("true and pred must be equal-length 1D arrays")
    if true.size and (
        true.min() < 0
        or pred.min() < 0
        or true.max() >= n_classes
        or pred.max() >= n_classes
    ):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


@dataclass(frozen=True)
class Metrics:
    """Scores for one evaluation pass over a split."""

    confusion: np.ndarray
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    n_eval: int

    def to_json(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "precision": [float(x) for x in self.precision],
            "recall": [float(x) for x in self.recall],
            "n_eval": self.n_eval,
        }


def from_confusion(confusion: np.ndarray) -> Metrics:
    """Derive every scalar from the count matrix."""
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = int(confusion.sum())
    diag = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)  # row = true class
    predicted = confusion.sum(axis=0).astype(np.float64)

    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, diag / support, 0.0)
        precision = np.where(predicted > 0, diag / predicted, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)

    accuracy = float(diag.sum() / total) if total else 0.0
    return Metrics(
        confusion=confusion,
        accuracy=accuracy,
        macro_f1=float(f1.mean()),
        precision=precision,
        recall=recall,
        n_eval=total,
    )


def compute_metrics(true, pred, n_classes: int) -> Metrics:
    return from_confusion(confusion_matrix(true, pred, n_classes))
