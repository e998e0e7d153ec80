"""Binary classification metrics and fold-paired significance testing.

Conventions: class 1 is the positive class; AUC credits ties half a win
(midrank method); MCC is 0 whenever a denominator factor vanishes; SEN
and SPE refuse to divide by zero and raise instead.  The paired t-test
handles the two zero-variance corner cases explicitly: identical score
lists give p = 1, a constant nonzero difference sets the
perfect_separation flag with p = 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import (
    ConfigError,
    LabelError,
    MetricUndefinedError,
    RangeError,
    ShapeError,
)

METRIC_NAMES = ("mcc", "auc", "sen", "spe")


@dataclass(frozen=True)
class MetricsRecord:
    fold: int
    mcc: float
    auc: float
    sen: float
    spe: float

    def get(self, metric: str) -> float:
        if metric not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {metric!r}")
        return getattr(self, metric)


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    perfect_separation: bool


@dataclass(frozen=True)
class ComparisonResult:
    method_a: str
    method_b: str
    metric: str
    t_statistic: float
    p_value: float
    significant: bool
    alpha_corrected: float


def confusion(labels, predictions) -> tuple[int, int, int, int]:
    """Binary confusion counts (TP, FP, TN, FN) with class 1 positive."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(predictions, dtype=np.int64)
    if labels.shape != preds.shape or labels.ndim != 1:
        raise ShapeError(f"labels {labels.shape} and predictions {preds.shape} must be "
                         "1-d and equal length")
    for name, arr in (("labels", labels), ("predictions", preds)):
        bad = np.setdiff1d(arr, [0, 1])
        if bad.size:
            raise LabelError(f"{name} must be binary 0/1, found {bad.tolist()[:5]}")
    tp = int(((labels == 1) & (preds == 1)).sum())
    fp = int(((labels == 0) & (preds == 1)).sum())
    tn = int(((labels == 0) & (preds == 0)).sum())
    fn = int(((labels == 1) & (preds == 0)).sum())
    return tp, fp, tn, fn


def _check_counts(tp: int, fp: int, tn: int, fn: int) -> None:
    for name, v in (("TP", tp), ("FP", fp), ("TN", tn), ("FN", fn)):
        if v < 0:
            raise RangeError(f"{name} must be nonnegative, got {v}")


def mcc(tp: int, fp: int, tn: int, fn: int) -> float:
    """Matthews correlation coefficient; 0 when any denominator factor is 0."""
    _check_counts(tp, fp, tn, fn)
    num = float(tp) * tn - float(fp) * fn
    den = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0.0:
        return 0.0
    return num / math.sqrt(den)


def auc(labels, scores) -> float:
    """P(random positive outscores random negative), ties worth half."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ShapeError(f"labels {labels.shape} and scores {scores.shape} must be "
                         "1-d and equal length")
    bad = np.setdiff1d(labels, [0, 1])
    if bad.size:
        raise LabelError(f"labels must be binary 0/1, found {bad.tolist()[:5]}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auc needs both classes present")
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def sen_spe(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float]:
    """(sensitivity, specificity); raises when a class is absent."""
    _check_counts(tp, fp, tn, fn)
    if tp + fn == 0:
        raise MetricUndefinedError("sensitivity undefined: no positive samples")
    if tn + fp == 0:
        raise MetricUndefinedError("specificity undefined: no negative samples")
    return tp / (tp + fn), tn / (tn + fp)


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided p-value of Student's t via the regularized incomplete beta."""
    if df < 1:
        raise RangeError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 1.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t-test on per-fold score differences."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"score lists must be 1-d and equal length, got {a.shape} and {b.shape}")
    k = a.shape[0]
    if k < 2:
        raise MetricUndefinedError(f"paired t-test needs at least 2 folds, got {k}")
    diffs = a - b
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t_statistic=0.0, p_value=1.0, perfect_separation=False)
        return TTestResult(
            t_statistic=math.copysign(math.inf, mean), p_value=0.0, perfect_separation=True
        )
    t = mean / (sd / math.sqrt(k))
    return TTestResult(t_statistic=t, p_value=t_sf_two_sided(t, k - 1),
                       perfect_separation=False)


def bonferroni(alpha: float, m: int) -> float:
    """Corrected per-comparison threshold alpha/m."""
    if not (0.0 < alpha < 1.0):
        raise RangeError(f"alpha must be in (0, 1), got {alpha}")
    if m < 1:
        raise ConfigError(f"number of comparisons must be >= 1, got {m}")
    return alpha / m


def classification_metrics(labels, scores, predictions, fold: int = 0) -> MetricsRecord:
    """All four metrics from one fold's labels, class-1 scores, and predictions."""
    tp, fp, tn, fn = confusion(labels, predictions)
    sen, spe = sen_spe(tp, fp, tn, fn)
    return MetricsRecord(
        fold=fold,
        mcc=mcc(tp, fp, tn, fn),
        auc=auc(labels, scores),
        sen=sen,
        spe=spe,
    )


def export_metrics_csv(rows, path) -> None:
    """Write (method, scenario, MetricsRecord) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scenario", "fold", "mcc", "auc", "sen", "spe"])
        for method, scenario, rec in rows:
            writer.writerow(
                [method, scenario, rec.fold]
                + [repr(float(v)) for v in (rec.mcc, rec.auc, rec.sen, rec.spe)]
            )


def export_comparisons_csv(results, path) -> None:
    """Write ComparisonResult rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method_a", "method_b", "metric", "t", "p", "significant", "alpha_corrected"]
        )
        for r in results:
            writer.writerow(
                [r.method_a, r.method_b, r.metric,
                 repr(float(r.t_statistic)), repr(float(r.p_value)),
                 int(r.significant), repr(float(r.alpha_corrected))]
            )
