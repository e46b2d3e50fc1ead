"""Subgroup fairness assessment: per-subgroup discrimination and
confusion-derived rates, equal-opportunity differences (TPR gap), FPR gaps,
and bias flags at the 0.05 thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cohort import AGE_BANDS, PatientRecord, SubgroupKey
from .errors import ValidationError
from .metrics import auroc, confusion_at

EOD_FLAG_THRESHOLD = 0.05
AUROC_GAP_FLAG_THRESHOLD = 0.05

# The five standard comparisons, in reporting order.
STANDARD_COMPARISONS = (
    ("sex", SubgroupKey(sex="male"), SubgroupKey(sex="female")),
    ("age", SubgroupKey(age_band="18-59"), SubgroupKey(age_band="60+")),
    ("race", SubgroupKey(race="white"), SubgroupKey(race="black")),
    ("race", SubgroupKey(race="white"), SubgroupKey(race="other")),
    ("race", SubgroupKey(race="white"), SubgroupKey(race="asian")),
)

MARGINAL_KEYS = (
    SubgroupKey(sex="male"),
    SubgroupKey(sex="female"),
    SubgroupKey(age_band="18-59"),
    SubgroupKey(age_band="60+"),
    SubgroupKey(race="white"),
    SubgroupKey(race="black"),
    SubgroupKey(race="asian"),
    SubgroupKey(race="other"),
)


@dataclass(frozen=True)
class SubgroupMetrics:
    key: SubgroupKey
    n: int
    auroc: float | None  # None when the subgroup is single-class
    tpr: float | None
    fpr: float | None
    fnr: float | None
    tnr: float | None


@dataclass(frozen=True)
class FairnessComparison:
    dimension: str
    group_a: str
    group_b: str
    eod: float
    fpr_a: float | None
    fpr_b: float | None
    auroc_gap: float | None
    flag_eod: bool
    flag_auroc: bool


def subgroup_metrics(
    data: list[tuple[PatientRecord, float]],
    threshold: float,
    key: SubgroupKey,
) -> SubgroupMetrics:
    """Rates and AUROC for the records matching a (possibly marginal) key."""
    if not data:
        raise ValidationError("empty data")
    matched = [(r, s) for r, s in data if key.matches(r)]
    if not matched:
        raise ValidationError(f"empty subgroup {key.label()!r}")
    scores = [s for _, s in matched]
    labels = [r.died_in_hospital for r, _ in matched]
    c = confusion_at(scores, labels, threshold)
    try:
        group_auroc = auroc(scores, labels)
    except ValidationError:
        group_auroc = None
    pos = c.tp + c.fn
    neg = c.fp + c.tn
    return SubgroupMetrics(
        key=key,
        n=len(matched),
        auroc=group_auroc,
        tpr=c.tp / pos if pos > 0 else None,
        fpr=c.fp / neg if neg > 0 else None,
        fnr=c.fn / pos if pos > 0 else None,
        tnr=c.tn / neg if neg > 0 else None,
    )


def compare(dimension: str, a: SubgroupMetrics, b: SubgroupMetrics) -> FairnessComparison:
    """Equal-opportunity difference between two subgroups, with bias flags."""
    if a.tpr is None or b.tpr is None:
        missing = a.key.label() if a.tpr is None else b.key.label()
        raise ValidationError(f"TPR undefined for group {missing!r} (no positives)")
    eod = abs(a.tpr - b.tpr)
    auroc_gap = None
    if a.auroc is not None and b.auroc is not None:
        auroc_gap = abs(a.auroc - b.auroc)
    return FairnessComparison(
        dimension=dimension,
        group_a=a.key.label(),
        group_b=b.key.label(),
        eod=eod,
        fpr_a=a.fpr,
        fpr_b=b.fpr,
        auroc_gap=auroc_gap,
        flag_eod=eod > EOD_FLAG_THRESHOLD,
        flag_auroc=auroc_gap is not None and auroc_gap > AUROC_GAP_FLAG_THRESHOLD,
    )


@dataclass(frozen=True)
class FairnessReport:
    comparisons: tuple[FairnessComparison, ...]
    # dimension -> max pairwise AUROC gap over that dimension's groups
    max_auroc_gap: dict[str, float | None]


def _dimension_groups(dimension: str) -> list[SubgroupKey]:
    if dimension == "sex":
        return [SubgroupKey(sex="male"), SubgroupKey(sex="female")]
    if dimension == "age":
        return [SubgroupKey(age_band=b) for b in AGE_BANDS]
    if dimension == "race":
        return [SubgroupKey(race=r) for r in ("white", "black", "asian", "other")]
    raise ValidationError(f"unknown dimension {dimension!r}")


def max_auroc_gap(
    data: list[tuple[PatientRecord, float]],
    threshold: float,
    dimension: str,
) -> float | None:
    """Max |AUROC_a - AUROC_b| over the dimension's groups with defined AUROC."""
    values = []
    for key in _dimension_groups(dimension):
        try:
            m = subgroup_metrics(data, threshold, key)
        except ValidationError:
            continue
        if m.auroc is not None:
            values.append(m.auroc)
    if len(values) < 2:
        return None
    return max(values) - min(values)


def fairness_report(
    data: list[tuple[PatientRecord, float]],
    threshold: float,
) -> FairnessReport:
    """The five standard comparisons plus per-dimension max AUROC gaps."""
    comparisons = []
    for dimension, key_a, key_b in STANDARD_COMPARISONS:
        name = f"{key_a.label()} vs {key_b.label()}"
        try:
            a = subgroup_metrics(data, threshold, key_a)
            b = subgroup_metrics(data, threshold, key_b)
            comparisons.append(compare(dimension, a, b))
        except ValidationError as exc:
            raise ValidationError(f"comparison {name}: {exc}") from None
    gaps = {dim: max_auroc_gap(data, threshold, dim) for dim in ("sex", "age", "race")}
    return FairnessReport(comparisons=tuple(comparisons), max_auroc_gap=gaps)
