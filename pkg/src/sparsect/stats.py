"""Statistics for the evaluation loop.

Percentile bootstrap, Wilcoxon signed-rank (normal approximation),
DeLong AUC variance and paired test via the O(n log n) midrank
formulation of Sun & Xu, ROC points, geometric-mean thresholds,
Bonferroni and k-fold splitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import rankdata

from .core import Rng, fisher_yates_shuffle

__all__ = [
    "RocAnalysis",
    "ConfusionMatrix",
    "bootstrap_mean_ci",
    "wilcoxon_signed_rank",
    "midranks",
    "delong_analysis",
    "delong_covariance",
    "delong_test",
    "wald_ci",
    "roc_curve",
    "trapezoid_auc",
    "confusion_at",
    "gmean_threshold",
    "bonferroni",
    "kfold_split",
]


def _norm_sf(z: float) -> float:
    return 0.5 * special.erfc(z / math.sqrt(2.0))


def bootstrap_mean_ci(values, n_resamples: int = 1000, level: float = 0.95, rng: Rng | None = None):
    """Percentile bootstrap CI of the mean. Returns ``(mean, lo, hi)``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("bootstrap_mean_ci needs at least one value")
    if rng is None:
        rng = Rng(0)
    idx = rng.integers(x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    mean = float(x.mean())
    if np.all(x == x[0]):
        # resampled means of a constant array can differ from it by one ulp
        return mean, mean, mean
    return mean, float(lo), float(hi)


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank test of ``a - b``.

    Zero differences are dropped, ties get midranks and the variance is
    tie-corrected; the p-value uses the normal approximation with a 0.5
    continuity correction.  Returns ``(W, p)`` with ``W = min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("wilcoxon_signed_rank needs equal-length samples")
    d = (a - b).ravel()
    d = d[d != 0]
    n = d.size
    if n < 10:
        raise ValueError(f"need at least 10 non-zero differences, got {n}")
    r = rankdata(np.abs(d))
    w_plus = float(r[d > 0].sum())
    w_minus = float(r[d < 0].sum())
    w = min(w_plus, w_minus)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
    if var <= 0:
        return w, 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return w, float(min(1.0, 2.0 * _norm_sf(z)))


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average, via one sort."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = xs.size
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    group_rank = 0.5 * (starts + ends - 1) + 1.0
    ranks_sorted = np.repeat(group_rank, ends - starts)
    out = np.empty(n)
    out[order] = ranks_sorted
    return out


@dataclass(frozen=True)
class RocAnalysis:
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    v10: np.ndarray  # one structural component per positive
    v01: np.ndarray  # one per negative
    variance: float

    @property
    def n_pos(self) -> int:
        return self.v10.size

    @property
    def n_neg(self) -> int:
        return self.v01.size


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return s, y


def _var(x: np.ndarray) -> float:
    return float(np.var(x, ddof=1)) if x.size > 1 else 0.0


def _cov(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    return float(np.sum((x - x.mean()) * (y - y.mean())) / (x.size - 1))


def delong_analysis(scores, labels) -> RocAnalysis:
    """AUC and DeLong structural components from midranks.

    ``v10[i]`` is the fraction of negatives scored below positive ``i``
    (ties count one half), ``v01[j]`` the fraction of positives above
    negative ``j``.  Variance uses unbiased sample variances; a class
    with a single member contributes zero.
    """
    s, y = _split(scores, labels)
    pos, neg = s[y], s[~y]
    m, n = pos.size, neg.size
    tz = midranks(s)
    tx = midranks(pos)
    ty = midranks(neg)
    v10 = (tz[y] - tx) / n
    v01 = 1.0 - (tz[~y] - ty) / m
    auc = float((tz[y].sum() - m * (m + 1) / 2.0) / (m * n))
    variance = _var(v10) / m + _var(v01) / n
    return RocAnalysis(s, y, auc, v10, v01, max(variance, 0.0))


def delong_covariance(a: RocAnalysis, b: RocAnalysis) -> float:
    if not np.array_equal(a.labels, b.labels):
        raise ValueError("paired DeLong analyses need identical labels")
    return _cov(a.v10, b.v10) / a.n_pos + _cov(a.v01, b.v01) / a.n_neg


def delong_test(scores_a, scores_b, labels):
    """Two-sided DeLong test for two correlated AUCs. Returns ``(z, p)``.

    A non-positive variance of the difference yields ``(0, 1)`` when the
    AUCs agree and an infinite ``z`` with ``p = 0`` otherwise.
    """
    ra = delong_analysis(scores_a, labels)
    rb = delong_analysis(scores_b, labels)
    diff = ra.auc - rb.auc
    var = ra.variance + rb.variance - 2.0 * delong_covariance(ra, rb)
    if var <= 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    z = diff / math.sqrt(var)
    return float(z), float(min(1.0, 2.0 * _norm_sf(abs(z))))


def wald_ci(analysis: RocAnalysis, level: float = 0.95) -> tuple[float, float]:
    """Normal CI ``auc +/- z * sqrt(variance)``, clipped to [0, 1]."""
    z = math.sqrt(2.0) * special.erfinv(level)
    half = z * math.sqrt(analysis.variance)
    return max(0.0, analysis.auc - half), min(1.0, analysis.auc + half)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """ROC points ``(fpr, tpr, threshold)``; predicted positive means score >= threshold.

    The first point is ``(0, 0, +inf)``; then one point per unique score,
    descending, so the last point is ``(1, 1, min score)``.
    """
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    P, N = float(y.sum()), float((~y).sum())
    pts = [(0.0, 0.0, math.inf)]
    for k in np.flatnonzero(last_of_group):
        pts.append((fps[k] / N, tps[k] / P, float(s_sorted[k])))
    return pts


def trapezoid_auc(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def tnr(self) -> float:
        return self.tn / (self.tn + self.fp)

    @property
    def gmean(self) -> float:
        return math.sqrt(self.tpr * self.tnr)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "threshold": self.threshold}


def confusion_at(scores, labels, threshold: float) -> ConfusionMatrix:
    s, y = _split(scores, labels)
    pred = s >= threshold
    return ConfusionMatrix(
        int(np.sum(pred & y)),
        int(np.sum(pred & ~y)),
        int(np.sum(~pred & y)),
        int(np.sum(~pred & ~y)),
        float(threshold),
    )


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[1:] + u[:-1]) / 2.0
    return np.r_[-math.inf, mids, math.inf]


def gmean_threshold(scores, labels):
    """Threshold maximising ``sqrt(TPR * TNR)`` over midpoints of unique scores and +-inf.

    Ties go to the smallest threshold.  Returns ``(threshold, ConfusionMatrix)``.
    """
    s, y = _split(scores, labels)
    cands = threshold_candidates(s)
    # vectorised counts: positives/negatives with score >= each candidate
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = pos_sorted.size - np.searchsorted(pos_sorted, cands, side="left")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, cands, side="left")
    # tp * tn is proportional to gmean^2 and exact in integers, so ties are exact
    score = tp.astype(np.int64) * (neg_sorted.size - fp)
    best = int(np.argmax(score))
    thr = float(cands[best])
    return thr, confusion_at(s, y, thr)


def bonferroni(alpha: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be >= 1")
    return alpha / m


def kfold_split(n: int, k: int, rng: Rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle ``range(n)`` and cut it into ``k`` folds; the first ``n % k`` folds get one extra."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.array(fisher_yates_shuffle(range(n), rng), dtype=np.int64)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds = []
    start = 0
    for size in sizes:
        val = perm[start : start + size]
        train = np.concatenate([perm[:start], perm[start + size :]])
        folds.append((train, val))
        start += size
    return folds
