"""AUC, GAUC, logloss and the per-user CTR-shift diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import DataError, UndefinedMetricError

LOGLOSS_EPS = 1e-7


def _wins(scores, labels) -> tuple[Fraction, int]:
    """Positive-over-negative wins (ties count half) as an exact rational, and the pair count."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    # tied ranks are half-integers, so the rank sum is exact in float64
    ranks = rankdata(scores)
    u = Fraction(float(ranks[labels == 1].sum())) - Fraction(n_pos * (n_pos + 1), 2)
    return u, n_pos * n_neg


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count one half."""
    u, pairs = _wins(scores, labels)
    return float(u / pairs)


@dataclass
class GaucResult:
    value: float
    n_users: int
    excluded_users: int


def gauc_detail(users, scores, labels) -> GaucResult:
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(users, kind="stable")
    uniq, starts, counts = np.unique(users[order], return_index=True, return_counts=True)
    weighted, total, n_users, excluded = Fraction(0), 0, 0, 0
    for s, c in zip(starts, counts):
        idx = order[s : s + c]
        y = labels[idx]
        if y.min() == y.max():
            excluded += 1
            continue
        u, pairs = _wins(scores[idx], y)
        weighted += int(c) * u / pairs
        total += int(c)
        n_users += 1
    if not total:
        raise UndefinedMetricError("GAUC needs at least one user with both labels")
    return GaucResult(float(weighted / total), n_users, excluded)


def gauc(users, scores, labels) -> float:
    """Impression-weighted mean of per-user AUC over users that have both labels."""
    return gauc_detail(users, scores, labels).value


def logloss(probabilities, labels) -> float:
    p = np.clip(np.asarray(probabilities, dtype=np.float64), LOGLOSS_EPS, 1 - LOGLOSS_EPS).tolist()
    y = np.asarray(labels, dtype=np.float64).tolist()
    # math.log per element: the same libm rounding as a scalar recomputation
    return math.fsum(-(t * math.log(q) + (1 - t) * math.log(1 - q)) for q, t in zip(p, y)) / len(y)


def metrics_report(users, scores, labels, probabilities=None, **tags) -> dict:
    """MetricsReport record: auc, gauc, logloss, n_eval, excluded_users plus any protocol tags."""
    g = gauc_detail(users, scores, labels)
    if probabilities is None:
        probabilities = 1.0 / (1.0 + np.exp(-np.asarray(scores, dtype=np.float64)))
    out = {
        "auc": auc(scores, labels),
        "gauc": g.value,
        "logloss": logloss(probabilities, labels),
        "n_eval": int(len(labels)),
        "excluded_users": g.excluded_users,
    }
    out.update(tags)
    return out


@dataclass
class ShiftHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    deltas: dict[int, float]
    frac_large_shift: float


def ctr_shift_histogram(
    train: Dataset,
    test: Dataset,
    item_field: str | int,
    popularity_cutoff: float = 0.2,
    bin_width: float = 0.05,
    large_shift: float = 0.1,
) -> ShiftHistogram:
    """Per shared user, test CTR minus train CTR on the most-impressed items of the train set."""
    f = item_field if isinstance(item_field, int) else train.schema.index(item_field)
    items, counts = np.unique(train.codes[:, f], return_counts=True)
    n_popular = max(1, int(math.ceil(popularity_cutoff * len(items))))
    order = np.lexsort((items, -counts))
    popular = set(items[order[:n_popular]].tolist())

    def per_user_ctr(ds: Dataset) -> dict[int, float]:
        keep = np.isin(ds.codes[:, f], list(popular))
        users = ds.users[keep]
        labels = ds.labels[keep]
        out = {}
        for u in np.unique(users):
            out[int(u)] = float(labels[users == u].mean())
        return out

    a, b = per_user_ctr(train), per_user_ctr(test)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise DataError("train and test share no users with impressions on popular items")
    deltas = {u: b[u] - a[u] for u in shared}
    values = np.array([deltas[u] for u in shared])
    n_bins = int(round(2 / bin_width))
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    # bins centred on multiples of bin_width so a zero shift lands in its own bin
    edges = edges - bin_width / 2
    edges = np.append(edges, edges[-1] + bin_width)
    hist, _ = np.histogram(np.round(values, 12), bins=edges)
    frac = float((np.abs(values) > large_shift).mean())
    return ShiftHistogram(edges, hist, deltas, frac)
