"""Evaluation metrics: rank-sum AUC, thresholded accuracy, systemic detection AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MetricUndefined


def compute_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Uses the Mann-Whitney rank-sum with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be 1-D and of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ConfigError("accuracy of an empty set")
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def systemic_detection_score(scores, flags) -> float:
    """AUC of risk scores against systemic-event flags (reported as ``systemic_auc``)."""
    return compute_auc(scores, flags)
