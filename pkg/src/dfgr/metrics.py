"""Ranking metrics: AUC and impression-weighted group AUC."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """The metric has no value for this input (e.g. a single class)."""


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted as 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, user_ids) -> float:
    """Mean of per-user AUC weighted by each user's impression count.

    Users whose impressions are all one class are left out of both the
    numerator and the denominator.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    groups: dict = defaultdict(list)
    for i, u in enumerate(np.asarray(user_ids).tolist()):
        groups[u].append(i)
    num = 0.0
    den = 0
    for u in sorted(groups):
        idx = np.asarray(groups[u])
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        num += auc(s[idx], yy) * idx.size
        den += idx.size
    if den == 0:
        raise UndefinedMetric("no user has both positive and negative impressions")
    return num / den
