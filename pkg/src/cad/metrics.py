"""Ranking metrics reported as percentages.

Both metrics are computed so that their floating-point result is identical to
the naive pairwise / rank-walk definitions: AUC reduces to a half-integer
count divided once, AP sums the exact same precision values with math.fsum.
"""

from __future__ import annotations

import math

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y


def auc(scores, labels) -> float:
    """Probability (in %) that a positive outscores a negative; ties count half."""
    s, y = _prep(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # twice the average rank of each tie group, kept integral
    _, first, counts = np.unique(s_sorted, return_index=True, return_counts=True)
    twice_rank = np.repeat(2 * first + counts + 1, counts)
    pos_twice_rank = int(twice_rank[y[order]].sum())
    # wins + ties/2 == (sum of positive ranks) - n_pos (n_pos + 1) / 2
    twice_u = pos_twice_rank - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg) * 100.0


def average_precision(scores, labels) -> float:
    """Mean over positives of precision at that positive's score threshold, in %.

    Tied scores share one threshold (step interpolation, no 11-point scheme).
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each tie group in descending order
    boundaries = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    cum_tp = np.cumsum(y_sorted)[boundaries]
    cum_all = boundaries + 1
    group_pos = np.diff(np.r_[0, cum_tp])
    precisions = [int(tp) / int(n) for tp, n in zip(cum_tp, cum_all)]
    terms = np.repeat(precisions, group_pos)
    return math.fsum(terms.tolist()) / n_pos * 100.0


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    p, y = _prep(probs, labels)
    return float(((p >= threshold) == y).mean() * 100.0)


# brute-force references, quadratic and deliberately naive


def auc_pairwise(scores, labels) -> float:
    s, y = _prep(scores, labels)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    wins = ties = 0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1
            elif a == b:
                ties += 1
    return ((2 * wins + ties) / 2) / (len(pos) * len(neg)) * 100.0


def ap_rank_walk(scores, labels) -> float:
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    precisions = []
    for i in range(len(s)):
        if not y[i]:
            continue
        at_or_above = [j for j in range(len(s)) if s[j] >= s[i]]
        hits = sum(1 for j in at_or_above if y[j])
        precisions.append(hits / len(at_or_above))
    return math.fsum(precisions) / n_pos * 100.0
