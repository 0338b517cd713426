"""Ranking metrics and the paired bootstrap comparison.

Scores follow the higher-is-more-anomalous convention and labels are
0 = normal, 1 = anomalous. AUROC uses the Mann-Whitney form with ties
counted 1/2; AUPR is step-interpolated average precision; the partial
AUROC integrates the ROC curve up to FPR 0.3 and is reported both raw
and standardized so 0.5 again means chance and 1.0 perfection:

    standardized = (1 + (pauc - min_area) / (max_area - min_area)) / 2

with min_area = max_fpr^2 / 2 (chance) and max_area = max_fpr.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import NumericError, ShapeError, UsageError

MAX_FPR = 0.3


def validate_scored(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ShapeError(f"labels {labels.shape} and scores {scores.shape} must be equal 1-D")
    if not np.isin(labels, (0, 1)).all():
        raise UsageError("labels must be 0 (normal) or 1 (anomalous)")
    labels = labels.astype(np.int64)
    if labels.min() == labels.max():
        raise UsageError("need both classes present to rank")
    if not np.isfinite(scores).all():
        raise NumericError("scores contain non-finite values")
    return labels, scores


def auroc(labels: np.ndarray, scores: np.ndarray) -> float:
    """P(score_anomalous > score_normal) with ties counted 1/2."""
    labels, scores = validate_scored(labels, scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pr_groups(labels: np.ndarray, scores: np.ndarray):
    """Cumulative (tp, fp) at each unique descending score threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each tie group
    boundary = np.flatnonzero(np.diff(s) != 0.0)
    ends = np.concatenate([boundary, [len(s) - 1]])
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = np.cumsum(1 - y)[ends].astype(np.float64)
    return tp, fp


def aupr(labels: np.ndarray, scores: np.ndarray) -> float:
    """Average precision: sum of precision * recall increments per threshold."""
    labels, scores = validate_scored(labels, scores)
    tp, fp = _pr_groups(labels, scores)
    n_pos = labels.sum()
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def partial_auroc(labels: np.ndarray, scores: np.ndarray, max_fpr: float = MAX_FPR) -> tuple[float, float]:
    """(raw, standardized) partial AUROC over FPR in [0, max_fpr].

    Trapezoidal integration over the ROC corner points, with linear
    interpolation at the max_fpr cut.
    """
    labels, scores = validate_scored(labels, scores)
    if not (0.0 < max_fpr <= 1.0):
        raise UsageError(f"max_fpr must be in (0, 1], got {max_fpr}")
    tp, fp = _pr_groups(labels, scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    x = np.concatenate([[0.0], fp / n_neg])
    y = np.concatenate([[0.0], tp / n_pos])
    dx = np.diff(x)
    mid = 0.5 * (y[1:] + y[:-1])
    inside = x[1:] <= max_fpr
    raw = float(np.sum(dx[inside] * mid[inside]))
    crossing = np.flatnonzero((x[:-1] < max_fpr) & (x[1:] > max_fpr))
    if len(crossing):
        # x is nondecreasing, so at most one segment straddles the cut
        i = int(crossing[0])
        t = (max_fpr - x[i]) / (x[i + 1] - x[i])
        y_cut = y[i] + t * (y[i + 1] - y[i])
        raw += 0.5 * (y[i] + y_cut) * (max_fpr - x[i])
    min_area = 0.5 * max_fpr * max_fpr
    max_area = max_fpr
    standardized = 0.5 * (1.0 + (raw - min_area) / (max_area - min_area))
    return float(raw), float(standardized)


def auroc30(labels: np.ndarray, scores: np.ndarray) -> float:
    return partial_auroc(labels, scores, MAX_FPR)[1]


def roc_points(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) corner points including the leading (0, 0)."""
    labels, scores = validate_scored(labels, scores)
    tp, fp = _pr_groups(labels, scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    return (
        np.concatenate([[0.0], fp / n_neg]),
        np.concatenate([[0.0], tp / n_pos]),
    )


def pr_points(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at each unique descending threshold."""
    labels, scores = validate_scored(labels, scores)
    tp, fp = _pr_groups(labels, scores)
    return tp / labels.sum(), tp / (tp + fp)


METRICS = {"auroc": auroc, "aupr": aupr, "auroc30": auroc30}


def evaluate_scores(labels: np.ndarray, scores: np.ndarray) -> dict[str, float]:
    """All headline metrics for one score vector."""
    raw, std = partial_auroc(labels, scores)
    return {
        "auroc": auroc(labels, scores),
        "aupr": aupr(labels, scores),
        "auroc30": std,
        "auroc30_raw": raw,
    }


# ---------------------------------------------------------------------------
# paired bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapReport:
    """Outcome of comparing several methods on one scored test set."""

    metric: str
    point: dict[str, float]
    best: str
    p_values: dict[str, float]
    threshold: float
    n_resamples: int
    seed: int
    bold: set[str] = field(default_factory=set)
    underline: set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "point": self.point,
            "best": self.best,
            "p_values": self.p_values,
            "threshold": self.threshold,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "bold": sorted(self.bold),
            "underline": sorted(self.underline),
        }


def paired_bootstrap(
    scores_by_method: dict[str, np.ndarray],
    labels: np.ndarray,
    metric: str = "aupr",
    n_resamples: int = 1000,
    seed: int = 0,
    alpha: float = 0.01,
) -> BootstrapReport:
    """Compare methods on the same samples with paired resampling.

    Every resample draws one index vector applied to all methods. The
    p-value of each method is the fraction of resamples in which it
    matches or outperforms (>=, exact float compare) the point-estimate
    winner; methods with p above the Bonferroni-corrected threshold
    alpha/(m-1) are marked indistinguishable from the winner.
    """
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}, expected one of {sorted(METRICS)}")
    if len(scores_by_method) < 2:
        raise UsageError("need at least two methods to compare")
    fn = METRICS[metric]
    names = list(scores_by_method)
    labels = np.asarray(labels)
    mats = {}
    for name in names:
        lab, sc = validate_scored(labels, scores_by_method[name])
        mats[name] = sc
    labels = lab

    point = {name: fn(labels, mats[name]) for name in names}
    best = max(names, key=lambda n: (point[n], -names.index(n)))

    rng = np.random.default_rng(seed)
    n = len(labels)
    wins = {name: 0 for name in names}
    for _ in range(n_resamples):
        for _attempt in range(100):
            idx = rng.integers(0, n, size=n)
            sub = labels[idx]
            if sub.min() == 0 and sub.max() == 1:
                break
        else:
            raise NumericError("could not draw a two-class bootstrap resample")
        vals = {name: fn(sub, mats[name][idx]) for name in names}
        for name in names:
            if vals[name] >= vals[best]:
                wins[name] += 1

    p_values = {name: wins[name] / n_resamples for name in names}
    m = len(names)
    threshold = alpha / (m - 1)
    underline = {
        name for name in names if name != best and p_values[name] > threshold
    }
    return BootstrapReport(
        metric=metric,
        point=point,
        best=best,
        p_values=p_values,
        threshold=threshold,
        n_resamples=n_resamples,
        seed=seed,
        bold={best},
        underline=underline,
    )
