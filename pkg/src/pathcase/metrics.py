"""Weighted F1, weighted one-vs-rest ROC-AUC and balanced accuracy."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


class MetricWarning(UserWarning):
    pass


def _present(y_true, n_classes=None):
    y_true = np.asarray(y_true)
    K = int(n_classes) if n_classes is not None else int(y_true.max()) + 1
    support = np.bincount(y_true, minlength=K)[:K]
    absent = [k for k in range(K) if support[k] == 0]
    if absent and n_classes is not None:
        warnings.warn(f"classes {absent} absent from true labels; excluded from weighting",
                      MetricWarning, stacklevel=3)
    return support


def weighted_f1(y_true, y_pred, n_classes=None) -> float:
    """Support-weighted mean of per-class F1 (classes absent from ``y_true`` weigh 0)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    support = _present(y_true, n_classes)
    total = 0.0
    for k in np.flatnonzero(support):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = support[k] - tp
        denom = 2 * tp + fp + fn
        total += support[k] * (2 * tp / denom if denom else 0.0)
    return float(total / support.sum())


def balanced_accuracy(y_true, y_pred, n_classes=None) -> float:
    """Mean per-class recall over classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    support = _present(y_true, n_classes)
    recalls = [np.mean(y_pred[y_true == k] == k) for k in np.flatnonzero(support)]
    return float(np.mean(recalls))


def roc_auc(y_binary, scores) -> float:
    """Binary AUC via the rank-sum identity; tied scores count one half."""
    y = np.asarray(y_binary).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def weighted_roc_auc(y_true, proba, n_classes=None) -> float:
    """One-vs-rest AUC weighted by class support; the binary case is plain AUC of class 1."""
    y_true = np.asarray(y_true)
    proba = np.asarray(proba, dtype=np.float64)
    K = proba.shape[1]
    support = _present(y_true, n_classes if n_classes is not None else K)
    if K == 2:
        return roc_auc(y_true == 1, proba[:, 1])
    num = den = 0.0
    for k in np.flatnonzero(support):
        auc = roc_auc(y_true == k, proba[:, k])
        if np.isnan(auc):
            continue
        num += support[k] * auc
        den += support[k]
    if den == 0:
        warnings.warn("ROC-AUC undefined: a single class in the true labels", MetricWarning,
                      stacklevel=2)
        return float("nan")
    return float(num / den)


def compute_metrics(y_true, y_pred, proba, n_classes=None) -> dict:
    """The three reported metrics for one evaluation split."""
    proba = np.asarray(proba, dtype=np.float64)
    K = n_classes if n_classes is not None else proba.shape[1]
    return {
        "weighted_f1": weighted_f1(y_true, y_pred, K),
        "weighted_auc": weighted_roc_auc(y_true, proba, K),
        "balanced_accuracy": balanced_accuracy(y_true, y_pred, K),
    }


def prior_baseline_f1(y) -> float:
    """Best weighted F1 of a label-blind predictor: the max of always-majority and
    prior-sampling (expected ``sum p_k^2``)."""
    y = np.asarray(y)
    p = np.bincount(y) / len(y)
    majority = p.max() * 2 * p.max() / (1 + p.max())
    return float(max(majority, np.sum(p ** 2)))
