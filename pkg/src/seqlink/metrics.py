"""Evaluation metrics and the Wilcoxon rank-sum test."""
from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def evaluate_mse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise MetricError(f"shape mismatch: {predictions.shape} vs {targets.shape}")
    return float(np.mean((predictions - targets) ** 2))


def evaluate_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


EXACT_LIMIT = 12


def _exact_p(twice_ranks: list[int], n_a: int, observed: int) -> float:
    """Two-sided exact p-value by counting subsets (dynamic programming over rank sums).

    All quantities are doubled ranks so midranks stay integral.
    """
    N = len(twice_ranks)
    # counts[j][s]: number of j-element subsets with doubled rank sum s
    counts = [Counter() for _ in range(n_a + 1)]
    counts[0][0] = 1
    for r in twice_ranks:
        for j in range(min(n_a, N) - 1, -1, -1):
            for s, c in counts[j].items():
                counts[j + 1][s + r] += c
    total = math.comb(N, n_a)
    # doubled rank sum has expectation n_a * (N + 1)
    centre = n_a * (N + 1)
    obs_dev = abs(observed - centre)
    extreme = sum(c for s, c in counts[n_a].items() if abs(s - centre) >= obs_dev)
    return float(Fraction(extreme, total))


def rank_sum_test(a, b) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact permutation distribution when ``len(a) + len(b) <= 12``, otherwise
    the normal approximation with tie correction (no continuity correction).
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("rank_sum_test needs two non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n_a, n_b = a.size, b.size
    N = n_a + n_b
    if N <= EXACT_LIMIT:
        twice = [int(round(2 * r)) for r in ranks]
        return _exact_p(twice, n_a, sum(twice[:n_a]))
    w = ranks[:n_a].sum()
    mean_w = n_a * (N + 1) / 2
    ties = np.array(list(Counter(pooled.tolist()).values()), dtype=float)
    var_w = n_a * n_b / 12 * ((N + 1) - (ties ** 3 - ties).sum() / (N * (N - 1)))
    if var_w <= 0:
        return 1.0
    z = (w - mean_w) / math.sqrt(var_w)
    return float(min(1.0, math.erfc(abs(z) / math.sqrt(2))))
