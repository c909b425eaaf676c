"""Classification metrics: ACC, macro/weighted F1, multiclass MCC, output histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise MetricsError("label vectors differ in length")
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=0), y_pred.max(initial=0))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _as_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricsError("confusion matrix must be square")
    if cm.sum() <= 0:
        raise MetricsError("empty confusion matrix")
    return cm.astype(np.float64)


def accuracy(cm) -> float:
    cm = _as_cm(cm)
    return float(np.trace(cm) / cm.sum())


def f1_scores(cm) -> tuple[float, float, np.ndarray]:
    """(macro, weighted, per-class) F1; a class with P + R = 0 scores 0."""
    cm = _as_cm(cm)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    macro = float(np.mean(f1))
    weighted = float(np.sum(f1 * support) / support.sum())
    return macro, weighted, f1


def mcc(cm) -> float:
    """Gorodkin's multiclass MCC; 0 when either marginal has zero variance."""
    cm = _as_cm(cm)
    n = cm.sum()
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    cov = n * np.trace(cm) - t @ p
    var_p = n * n - p @ p
    var_t = n * n - t @ t
    if var_p <= 0 or var_t <= 0:
        return 0.0
    return float(cov / np.sqrt(var_p * var_t))


def classification_report(y_true, y_pred, n_classes: int | None = None) -> dict[str, float]:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    macro, weighted, _ = f1_scores(cm)
    return {"acc": accuracy(cm), "f1_macro": macro, "f1_weighted": weighted, "mcc": mcc(cm)}


@dataclass
class PredictionHistogram:
    """counts[m, t, b]: modality m, true label t, probability bin b (width 0.1)."""

    counts: np.ndarray
    edges: np.ndarray
    class_of_interest: int
    mean_max_prob: np.ndarray  # per modality

    def percentages(self) -> np.ndarray:
        tot = self.counts.sum(axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, 100.0 * self.counts / tot, 0.0)

    def to_rows(self) -> list[dict]:
        rows = []
        M, T, nb = self.counts.shape
        pct = self.percentages()
        for m in range(M):
            for t in range(T):
                for b in range(nb):
                    rows.append({"modality": m + 1, "true_label": t, "bin_lo": round(float(self.edges[b]), 10),
                                 "bin_hi": round(float(self.edges[b + 1]), 10),
                                 "count": int(self.counts[m, t, b]), "percent": float(pct[m, t, b])})
        return rows


def _bin_index(p: np.ndarray, n_bins: int) -> np.ndarray:
    # [lo, hi) bins, the last one closed at 1.0
    idx = np.floor(np.round(p * n_bins, 9)).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def prediction_histogram(outputs, labels, class_of_interest: int = 0, n_classes: int | None = None,
                         n_bins: int = 10) -> PredictionHistogram:
    """Bin the probability of ``class_of_interest`` per (modality, true label).

    ``outputs`` is (M, B, C) or a single (B, C) block.
    """
    x = np.asarray(outputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    labels = np.asarray(labels, dtype=np.int64)
    M, B, C = x.shape
    if labels.shape != (B,):
        raise MetricsError("labels do not match outputs")
    T = n_classes if n_classes is not None else C
    counts = np.zeros((M, T, n_bins), dtype=np.int64)
    for m in range(M):
        bins = _bin_index(x[m, :, class_of_interest], n_bins)
        np.add.at(counts[m], (labels, bins), 1)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return PredictionHistogram(counts, edges, class_of_interest, x.max(axis=2).mean(axis=1))
