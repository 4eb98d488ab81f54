"""Action-matching metrics for probabilistic predictions."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> Optional[float]:
    """Mann-Whitney estimate with mid-ranks for ties; ``None`` if only one class is present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> Optional[float]:
    """Trapezoidal area under the precision-recall curve, anchored at (recall 0, precision 1)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # one operating point per distinct threshold
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = np.r_[1.0, tp / (tp + fp)]
    recall = np.r_[0.0, tp / n_pos]
    return float(np.trapezoid(precision, recall))


def brier(prob_pos, labels) -> float:
    prob_pos = np.asarray(prob_pos, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return float(np.mean((prob_pos - labels) ** 2))


def accuracy(predicted, labels) -> float:
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def multiclass_auroc(probs, labels) -> Optional[float]:
    """Positive-class AUROC for two actions, otherwise mean one-vs-rest over present classes."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], labels == 1)
    values = [auroc(probs[:, k], labels == k) for k in range(probs.shape[1])]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None
