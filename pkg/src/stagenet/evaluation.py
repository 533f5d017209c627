"""Ranking metrics, bootstrap intervals, risk-band analytics and k-means
subtyping with the Calinski-Harabasz score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """A metric is undefined for the given scores/labels."""


def _check(scores, labels, need_negative: bool = True):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if scores.shape != labels.shape or scores.size == 0:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal and nonempty")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("no positive labels")
    if need_negative and n_pos == labels.size:
        raise MetricError("no negative labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney form: P(pos > neg) + P(tie) / 2, via midranks."""
    scores, labels = _check(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    pos = labels == 1
    n_pos, n_neg = pos.sum(), (~pos).sum()
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _pr_points(scores, labels):
    """Recall and precision at every distinct threshold, descending score."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # one point per distinct score: take the last index of each tie block
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    return tp / labels.sum(), tp / (tp + fp)


def auprc(scores, labels) -> float:
    """Step-wise average precision: sum of (R_n - R_{n-1}) * P_n."""
    scores, labels = _check(scores, labels, need_negative=False)
    recall, precision = _pr_points(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def min_re_p(scores, labels) -> float:
    """Largest min(recall, precision) over all thresholds."""
    scores, labels = _check(scores, labels, need_negative=False)
    recall, precision = _pr_points(scores, labels)
    return float(np.max(np.minimum(recall, precision)))


METRICS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc, "min_re_p": min_re_p}


@dataclass
class BootstrapResult:
    mean: float
    std: float
    n_used: int
    n_skipped: int


def bootstrap(scores, labels, metric: Callable = auroc, n_resamples: int = 1000,
              seed: int = 0, max_retries: int = 10) -> BootstrapResult:
    """Resample visits with replacement; single-class draws are redrawn."""
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, float).ravel()
    rng = np.random.default_rng(seed)
    n = len(scores)
    values, skipped = [], 0
    for _ in range(n_resamples):
        for _ in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            try:
                values.append(metric(scores[idx], labels[idx]))
                break
            except MetricError:
                continue
        else:
            skipped += 1
    if not values:
        raise MetricError("metric could not be computed on any resample")
    values = np.asarray(values)
    return BootstrapResult(float(values.mean()), float(values.std()), len(values), skipped)


# risk bands --------------------------------------------------------------------

RISK_BANDS = ("low", "medium", "high")


def risk_band(y_hat: np.ndarray) -> np.ndarray:
    """0 for <= 0.4, 1 for (0.4, 0.7), 2 for >= 0.7."""
    y_hat = np.asarray(y_hat, float)
    return np.where(y_hat >= 0.7, 2, np.where(y_hat > 0.4, 1, 0))


def risk_band_stage_table(y_hat, stage) -> dict[str, dict | None]:
    """Mean/std of stage variation per predicted-risk band; empty bands are None."""
    y_hat = np.asarray(y_hat, float).ravel()
    stage = np.asarray(stage, float).ravel()
    if y_hat.size == 0:
        raise ValueError("no visits")
    band = risk_band(y_hat)
    out = {}
    for b, name in enumerate(RISK_BANDS):
        sel = stage[band == b]
        out[name] = None if sel.size == 0 else {
            "mean": float(sel.mean()), "std": float(sel.std()), "count": int(sel.size)}
    return out


# clustering ---------------------------------------------------------------------

@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    ch_score: float = float("nan")
    ch_infinite: bool = False
    cluster_risk: list[float] = field(default_factory=list)
    cluster_predicted_risk: list[float] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "assignments": self.assignments.tolist(),
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
            "ch_score": None if self.ch_infinite else self.ch_score,
            "ch_infinite": self.ch_infinite,
            "cluster_risk": self.cluster_risk,
            "cluster_predicted_risk": self.cluster_predicted_risk,
        }


def _sq_dist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _lloyd(X, centers, max_iter, rng):
    k = len(centers)
    assign = None
    history = []
    for _ in range(max_iter):
        new = _sq_dist(X, centers).argmin(axis=1)
        # re-seed empty clusters with the point farthest from its centroid
        for c in range(k):
            if not np.any(new == c):
                far = _sq_dist(X, centers)[np.arange(len(X)), new].argmax()
                new[far] = c
                centers[c] = X[far]
        history.append(float(_sq_dist(X, centers)[np.arange(len(X)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centers = np.array([X[assign == c].mean(axis=0) for c in range(k)])
        history.append(float(((X - centers[assign]) ** 2).sum()))
    inertia = float(((X - centers[assign]) ** 2).sum())
    return assign, centers, inertia, history


def kmeans(X, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> ClusterResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` by inertia."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if k < 2 or len(X) < k:
        raise ValueError(f"need n >= k >= 2, got n={len(X)}, k={k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        assign, centers, inertia, history = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, rng)
        if best is None or inertia < best.inertia:
            best = ClusterResult(assign, centers, inertia, history=history)
    if len(X) > k:
        score = calinski_harabasz(X, best.assignments)
        best.ch_score, best.ch_infinite = score, math.isinf(score)
    return best


def calinski_harabasz(X, assignments) -> float:
    """(tr B / tr W) * (m - k) / (k - 1); returns +inf when tr W == 0."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(assignments)
    ids = np.unique(labels)
    m, k = len(X), len(ids)
    if k < 2 or m <= k:
        raise ValueError(f"need k >= 2 clusters and n > k, got k={k}, n={m}")
    overall = X.mean(axis=0)
    tr_b = tr_w = 0.0
    for c in ids:
        pts = X[labels == c]
        centre = pts.mean(axis=0)
        tr_b += len(pts) * float(((centre - overall) ** 2).sum())
        tr_w += float(((pts - centre) ** 2).sum())
    if tr_w == 0:
        return math.inf
    return tr_b / tr_w * (m - k) / (k - 1)


def adjusted_rand(a, b) -> float:
    """Adjusted Rand index between two labelings."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)

    def comb2(x):
        return x * (x - 1) / 2

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(len(a))
    top = (sum_a + sum_b) / 2
    if top == expected:
        return 1.0
    return float((sum_ij - expected) / (top - expected))


def cluster_agreement(assignments, truth) -> float:
    """Best-match accuracy between cluster ids and true groups (k <= 8)."""
    from itertools import permutations

    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    ks = np.unique(assignments)
    ts = np.unique(truth)
    best = 0.0
    for perm in permutations(ts, len(ks)) if len(ts) >= len(ks) else []:
        mapped = np.array([dict(zip(ks, perm))[a] for a in assignments])
        best = max(best, float((mapped == truth).mean()))
    return best
