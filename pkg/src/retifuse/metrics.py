"""Classification metrics: confusion matrix, accuracy, one-vs-rest AUROC."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError


def confusion_matrix(y_true, y_pred, k: int = 5) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DimensionError("y_true and y_pred must have the same length")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DimensionError(f"{name} has labels outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if y_true.size else math.nan


def auroc_binary(scores, positive) -> float:
    """Mann-Whitney AUROC from mid-ranks: ties between a positive and a negative count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_ovr(scores, y_true) -> tuple[list[float], float]:
    """Per-class one-vs-rest AUROC and their unweighted mean.

    Classes without positives or without negatives are undefined (NaN) and
    left out of the mean with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y_true.size:
        raise DimensionError(f"scores must be (n, K) with n = {y_true.size}, got {scores.shape}")
    per_class = [auroc_binary(scores[:, c], y_true == c) for c in range(scores.shape[1])]
    defined = [a for a in per_class if not math.isnan(a)]
    undefined = [c for c, a in enumerate(per_class) if math.isnan(a)]
    if undefined:
        warnings.warn(f"AUROC undefined for classes {undefined} (no positives or negatives)", stacklevel=2)
    macro = float(np.mean(defined)) if defined else math.nan
    return per_class, macro


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    auroc_per_class: list[float]
    auroc_macro: float
    n: int

    @classmethod
    def from_predictions(cls, y_true, probs, k: int | None = None) -> "MetricsReport":
        probs = np.asarray(probs, dtype=np.float64)
        k = k or probs.shape[1]
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.argmax(probs, axis=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            per_class, macro = auroc_ovr(probs, y_true)
        return cls(confusion_matrix(y_true, y_pred, k), accuracy(y_true, y_pred), per_class, macro, int(y_true.size))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": _nan_to_none(self.accuracy),
            "auroc_macro": _nan_to_none(self.auroc_macro),
            "auroc_per_class": [_nan_to_none(a) for a in self.auroc_per_class],
            "confusion": self.confusion.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def nan(v):
            return math.nan if v is None else float(v)

        return cls(
            np.asarray(d["confusion"], dtype=np.int64),
            nan(d["accuracy"]),
            [nan(a) for a in d["auroc_per_class"]],
            nan(d["auroc_macro"]),
            int(d["n"]),
        )


def mean_reports(reports: list[MetricsReport]) -> dict:
    """Average accuracy / AUROC across folds; confusion matrices are summed."""
    accs = [r.accuracy for r in reports]
    aucs = [r.auroc_macro for r in reports if not math.isnan(r.auroc_macro)]
    return {
        "accuracy": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "auroc_macro": float(np.mean(aucs)) if aucs else None,
        "confusion_sum": sum(r.confusion for r in reports).astype(int).tolist(),
        "n_folds": len(reports),
    }
