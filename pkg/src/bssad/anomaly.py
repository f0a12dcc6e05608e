"""Anomaly scoring and point-adjusted evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import DataError
from .filters import JITTER, GaussianBelief
from .timeseries import Dataset

Metric = Literal["f1", "mcc"]


@dataclass(frozen=True)
class ScoreSeries:
    scores: np.ndarray
    offset: int

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0):
            raise DataError("scores must be a vector of finite non-negative reals")
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ThresholdSearchResult:
    best_threshold: float
    best_f1: float
    best_mcc: float
    metric_optimized: Metric
    confusion: ConfusionMatrix
    table: list[tuple[float, float, float]] = field(repr=False, default_factory=list)


def mahalanobis(x, belief: GaussianBelief) -> float:
    """``sqrt((x - mu)^T (P + 1e-9 I)^-1 (x - mu))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != belief.mean.shape:
        raise DataError(f"observation length {x.shape[0]} does not match belief {belief.mean.shape[0]}")
    d = x - belief.mean
    P = belief.cov + JITTER * np.eye(d.shape[0])
    L = np.linalg.cholesky(P)
    y = np.linalg.solve(L, d)
    return float(math.sqrt(max(float(y @ y), 0.0)))


def score_series(xs: Dataset, beliefs: Sequence[GaussianBelief], tau: int) -> ScoreSeries:
    """Mahalanobis distance of ``x_t`` to its belief for ``t = tau .. T-1``."""
    n = xs.T - tau
    if len(beliefs) != n:
        raise DataError(f"got {len(beliefs)} beliefs for {n} scored timesteps (T={xs.T}, tau={tau})")
    scores = np.array([mahalanobis(xs.values[tau + k], b) for k, b in enumerate(beliefs)])
    return ScoreSeries(scores, tau)


def _binary(v, name: str) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim != 1:
        raise DataError(f"{name} must be a vector")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise DataError(f"{name} must be binary")
    return a.astype(bool)


def _segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of positive labels as ``[start, stop)`` pairs."""
    padded = np.concatenate([[0], labels.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def point_adjust(predictions, labels) -> np.ndarray:
    """Mark a whole labeled segment as detected when any point in it is flagged."""
    p = _binary(predictions, "predictions")
    y = _binary(labels, "labels")
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    out = p.copy()
    for a, b in _segments(y):
        if out[a:b].any():
            out[a:b] = True
    return out.astype(np.int8)


def confusion(predictions, labels) -> ConfusionMatrix:
    p = _binary(predictions, "predictions")
    y = _binary(labels, "labels")
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    return ConfusionMatrix(tp, fp, fn, p.size - tp - fp - fn)


def f1(cm: ConfusionMatrix) -> float:
    d = 2 * cm.tp + cm.fp + cm.fn
    return 0.0 if d == 0 else 2 * cm.tp / d


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    factors = (cm.tp + cm.fp, cm.tp + cm.fn, cm.tn + cm.fp, cm.tn + cm.fn)
    if any(f == 0 for f in factors):
        return 0.0
    # integer numerator, float sqrt of an exact integer product
    num = cm.tp * cm.tn - cm.fp * cm.fn
    return num / math.sqrt(math.prod(factors))


def best_threshold_search(
    scores: ScoreSeries | Sequence[float], labels, metric: Metric = "f1"
) -> ThresholdSearchResult:
    """Point-adjusted metric at every distinct score (and ``+inf``); keep the best.

    A point is flagged when ``score >= threshold``. After point adjustment a
    labeled segment counts fully as true positives once its maximum score
    reaches the threshold, so all candidates are evaluated in one sweep over
    sorted scores. Ties go to the larger threshold.
    """
    if metric not in ("f1", "mcc"):
        raise DataError(f"unknown metric {metric!r}")
    s = scores.scores if isinstance(scores, ScoreSeries) else np.asarray(scores, dtype=float)
    if s.size == 0:
        raise DataError("empty score series")
    y = _binary(labels, "labels")
    if y.shape != s.shape:
        raise DataError(f"length mismatch: {s.size} scores vs {y.size} labels")

    # each labeled segment acts as one item keyed by its max score, weighted by its length
    seg = _segments(y)
    seg_max = np.array([s[a:b].max() for a, b in seg])
    seg_len = np.array([b - a for a, b in seg])
    n_pos = int(y.sum())
    n_neg = int(s.size - n_pos)

    thresholds = np.unique(s)[::-1]  # descending
    neg_sorted = np.sort(s[~y])
    # counts with score >= thr
    fp_all = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    order = np.argsort(seg_max)
    seg_sorted = seg_max[order]
    cum_len = np.concatenate([[0], np.cumsum(seg_len[order])])
    below = np.searchsorted(seg_sorted, thresholds, side="left")
    tp_all = n_pos - cum_len[below]

    table: list[tuple[float, float, float]] = []
    inf_cm = ConfusionMatrix(0, 0, n_pos, n_neg)
    best_cm = inf_cm
    best_thr = math.inf
    best_val = f1(inf_cm) if metric == "f1" else mcc(inf_cm)
    table.append((math.inf, f1(inf_cm), mcc(inf_cm)))
    for thr, tp, fp in zip(thresholds.tolist(), tp_all.tolist(), fp_all.tolist()):
        cm = ConfusionMatrix(tp, fp, n_pos - tp, n_neg - fp)
        fv, mv = f1(cm), mcc(cm)
        table.append((thr, fv, mv))
        value = fv if metric == "f1" else mv
        if value > best_val:
            best_val, best_thr, best_cm = value, thr, cm
    table.reverse()  # ascending thresholds, +inf last
    return ThresholdSearchResult(best_thr, f1(best_cm), mcc(best_cm), metric, best_cm, table)


def evaluate_at(scores, labels, threshold: float) -> ConfusionMatrix:
    """Point-adjusted confusion matrix at a fixed threshold."""
    s = scores.scores if isinstance(scores, ScoreSeries) else np.asarray(scores, dtype=float)
    return confusion(point_adjust((s >= threshold).astype(np.int8), labels), labels)
