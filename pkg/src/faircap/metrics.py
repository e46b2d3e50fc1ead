"""Discrimination and calibration metric kernels.

All functions take (scores, labels) sequences; scores are probabilities in
[0, 1], labels are booleans (True = died). Ratios with empty denominators are
reported as None rather than 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ThresholdMetrics:
    confusion: ConfusionCounts
    accuracy: float
    f1: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None
    npv: float | None


@dataclass(frozen=True)
class MetricWithCI:
    point: float
    lo: float
    hi: float
    resamples: int
    seed: int


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-d sequences of equal length")
    if s.size == 0:
        raise ValidationError("empty input")
    if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
        raise ValidationError("scores must be finite probabilities in [0, 1]")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (positives * negatives)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC undefined for single-class input")
    ranks = rankdata(s)  # average ranks handle ties
    pos_rank_sum = float(ranks[y].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve.

    Non-interpolated step sum over recall increments; descending-score sweep
    with tied scores grouped at a single operating point.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("AUPRC undefined without positives")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    area = 0.0
    prev_recall = 0.0
    tp = 0
    seen = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j].sum())
        seen += j - i
        recall = tp / n_pos
        precision = tp / seen
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return area


def confusion_at(scores, labels, threshold: float) -> ConfusionCounts:
    """Confusion counts with the >= threshold positive-prediction rule."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def threshold_metrics(scores, labels, threshold: float) -> ThresholdMetrics:
    c = confusion_at(scores, labels, threshold)
    f1_den = 2 * c.tp + c.fp + c.fn
    return ThresholdMetrics(
        confusion=c,
        accuracy=(c.tp + c.tn) / c.n,
        f1=_ratio(2 * c.tp, f1_den),
        precision=_ratio(c.tp, c.tp + c.fp),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        npv=_ratio(c.tn, c.tn + c.fn),
    )


def brier(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((s - y.astype(float)) ** 2))


def _metric_accuracy(s, y, threshold):
    return threshold_metrics(s, y, threshold).accuracy


def _metric_defined(name):
    def wrap(fn):
        def inner(s, y, threshold):
            value = fn(s, y, threshold)
            if value is None:
                raise ValidationError(f"{name} undefined on this resample")
            return value
        return inner
    return wrap


METRICS = {
    "auroc": lambda s, y, t: auroc(s, y),
    "auprc": lambda s, y, t: auprc(s, y),
    "brier": lambda s, y, t: brier(s, y),
    "accuracy": _metric_accuracy,
    "f1": _metric_defined("f1")(lambda s, y, t: threshold_metrics(s, y, t).f1),
    "precision": _metric_defined("precision")(lambda s, y, t: threshold_metrics(s, y, t).precision),
    "sensitivity": _metric_defined("sensitivity")(lambda s, y, t: threshold_metrics(s, y, t).sensitivity),
    "specificity": _metric_defined("specificity")(lambda s, y, t: threshold_metrics(s, y, t).specificity),
    "npv": _metric_defined("npv")(lambda s, y, t: threshold_metrics(s, y, t).npv),
}


def compute_metric(name: str, scores, labels, threshold: float = 0.5) -> float:
    if name not in METRICS:
        raise ValidationError(f"unknown metric {name!r} (choose from {sorted(METRICS)})")
    return float(METRICS[name](np.asarray(scores, dtype=float), np.asarray(labels, dtype=bool), threshold))


def bootstrap_ci(
    scores,
    labels,
    metric: str,
    resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    threshold: float = 0.5,
) -> MetricWithCI:
    """Percentile bootstrap CI, deterministic per seed.

    Resamples where the metric is undefined (e.g. single-class AUROC draw)
    are redrawn, capped at 10x the requested count.
    """
    if resamples < 100:
        raise ValidationError("bootstrap_ci requires resamples >= 100")
    s, y = _as_arrays(scores, labels)
    point = compute_metric(metric, s, y, threshold)
    rng = np.random.default_rng(seed)
    n = s.size
    values = []
    attempts = 0
    cap = 10 * resamples
    while len(values) < resamples:
        if attempts >= cap:
            raise ValidationError(
                f"bootstrap for {metric}: exceeded {cap} draws with only "
                f"{len(values)} valid resamples (metric too fragile for this sample)"
            )
        idx = rng.integers(0, n, size=n)
        attempts += 1
        try:
            values.append(compute_metric(metric, s[idx], y[idx], threshold))
        except ValidationError:
            continue
    alpha = (1.0 - level) / 2.0
    lo = float(np.percentile(values, 100.0 * alpha))
    hi = float(np.percentile(values, 100.0 * (1.0 - alpha)))
    # percentile interval can exclude the point estimate in pathological
    # skews; widen so lo <= point <= hi always holds
    return MetricWithCI(
        point=point,
        lo=min(lo, point),
        hi=max(hi, point),
        resamples=resamples,
        seed=seed,
    )
