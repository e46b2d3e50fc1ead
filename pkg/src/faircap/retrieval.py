"""Analog-case retrieval: feature standardization (log1p for skewed labs),
weighted cosine similarity with a clinical-interval penalty, and the gated
top-1 lookup (>= 2 demographic matches, similarity >= 0.8).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import CLINICAL_FEATURES, PatientRecord, age_band
from .errors import ValidationError

DEFAULT_LOG_FEATURES = (
    "creatinine_max",
    "lactate_max",
    "troponin_max",
    "bilirubin_max",
    "wbc_max",
    "urine_24h",
)

# Artifact-default clinical breakpoints (ascending). Values crossing a
# breakpoint between query and case count as an interval crossing.
DEFAULT_INTERVALS = {
    "lactate_max": (2.0, 4.0),
    "creatinine_max": (1.2, 2.0),
    "spo2_min": (88.0, 92.0),
    "sofa_24h": (2.0, 6.0, 10.0),
}


@dataclass
class RetrievalConfig:
    weights: dict[str, float] = field(default_factory=dict)  # default 1.0 each
    log_features: tuple[str, ...] = DEFAULT_LOG_FEATURES
    intervals: dict[str, tuple[float, ...]] = field(
        default_factory=lambda: dict(DEFAULT_INTERVALS)
    )
    penalty_rho: float = 0.9
    min_similarity: float = 0.8
    min_demo_matches: int = 2

    def __post_init__(self):
        if not 0.0 < self.penalty_rho <= 1.0:
            raise ValidationError(f"penalty_rho must be in (0, 1], got {self.penalty_rho}")
        for name in self.weights:
            if name not in CLINICAL_FEATURES:
                raise ValidationError(f"weight for unknown feature {name!r}")
            if self.weights[name] < 0.0:
                raise ValidationError(f"negative weight for {name!r}")
        for name in self.log_features:
            if name not in CLINICAL_FEATURES:
                raise ValidationError(f"log transform for unknown feature {name!r}")
        for name, breaks in self.intervals.items():
            if name not in CLINICAL_FEATURES:
                raise ValidationError(f"intervals for unknown feature {name!r}")
            if list(breaks) != sorted(breaks) or len(set(breaks)) != len(breaks):
                raise ValidationError(f"breakpoints for {name!r} must be strictly ascending")
        if not any(self.weight_of(f) > 0.0 for f in CLINICAL_FEATURES):
            raise ValidationError("at least one feature weight must be positive")

    def weight_of(self, feature: str) -> float:
        return self.weights.get(feature, 1.0)

    def weight_vector(self) -> np.ndarray:
        return np.array([self.weight_of(f) for f in CLINICAL_FEATURES])


@dataclass
class Standardization:
    """Per-feature (mean, sd) on the transformed scale, from training data."""

    features: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    log_features: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "means": [float(v) for v in self.means],
            "sds": [float(v) for v in self.sds],
            "log_features": list(self.log_features),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardization":
        return cls(
            features=tuple(doc["features"]),
            means=np.array(doc["means"], dtype=float),
            sds=np.array(doc["sds"], dtype=float),
            log_features=tuple(doc["log_features"]),
        )


def _transform_raw(record: PatientRecord, features: tuple[str, ...], log_features) -> np.ndarray:
    out = np.empty(len(features))
    log_set = set(log_features)
    for i, name in enumerate(features):
        v = float(getattr(record, name))
        out[i] = math.log1p(v) if name in log_set else v
    return out


def fit_standardization(
    train: list[PatientRecord], config: RetrievalConfig
) -> Standardization:
    """Training-set (mean, sd) on the transformed scale; sd=0 is a config error."""
    if not train:
        raise ValidationError("cannot fit standardization on an empty cohort")
    mat = np.array([_transform_raw(r, CLINICAL_FEATURES, config.log_features) for r in train])
    means = mat.mean(axis=0)
    sds = mat.std(axis=0)
    if np.any(sds == 0.0):
        dead = [CLINICAL_FEATURES[i] for i in np.flatnonzero(sds == 0.0)]
        raise ValidationError(f"zero-variance feature(s): {', '.join(dead)}")
    return Standardization(
        features=CLINICAL_FEATURES,
        means=means,
        sds=sds,
        log_features=tuple(config.log_features),
    )


def normalize(
    patient: PatientRecord, standardization: Standardization, config: RetrievalConfig
) -> np.ndarray:
    """z-score on the transformed scale; demographics are excluded."""
    raw = _transform_raw(patient, standardization.features, standardization.log_features)
    vec = (raw - standardization.means) / standardization.sds
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"non-finite normalized vector for patient {patient.id}")
    return vec


def _interval_index(value: float, breaks: tuple[float, ...]) -> int:
    return bisect.bisect_right(list(breaks), value)


@dataclass(frozen=True)
class SimilarityResult:
    similarity: float
    crossed: tuple[str, ...]


def similarity(
    query_vec: np.ndarray,
    case_vec: np.ndarray,
    query_raw: dict[str, float],
    case_raw: dict[str, float],
    config: RetrievalConfig,
) -> SimilarityResult:
    """Weighted cosine, multiplied by penalty_rho per interval crossing."""
    q = np.asarray(query_vec, dtype=float)
    c = np.asarray(case_vec, dtype=float)
    if q.shape != c.shape:
        raise ValidationError(f"vector length mismatch: {q.shape} vs {c.shape}")
    w = config.weight_vector()
    if w.shape != q.shape:
        raise ValidationError(f"weight vector length {w.shape} does not match {q.shape}")
    qn = math.sqrt(float(np.sum(w * q * q)))
    cn = math.sqrt(float(np.sum(w * c * c)))
    if qn == 0.0 or cn == 0.0:
        return SimilarityResult(similarity=0.0, crossed=())
    base = float(np.sum(w * q * c)) / (qn * cn)
    crossed = []
    for name, breaks in sorted(config.intervals.items()):
        if name not in query_raw or name not in case_raw:
            continue
        if _interval_index(query_raw[name], breaks) != _interval_index(case_raw[name], breaks):
            crossed.append(name)
    value = base * config.penalty_rho ** len(crossed)
    return SimilarityResult(
        similarity=min(max(value, -1.0), 1.0),
        crossed=tuple(crossed),
    )


def demo_matches(query: PatientRecord, case_sex: str, case_age_band: str, case_race: str) -> int:
    """How many of sex / age band / race agree between query and case."""
    return (
        int(query.sex == case_sex)
        + int(age_band(query.age) == case_age_band)
        + int(query.race == case_race)
    )


@dataclass(frozen=True)
class RetrievalResult:
    case: "CaseRecord"
    similarity: float
    demo_matches: int
    crossed_features: tuple[str, ...]


def retrieve(
    query: PatientRecord,
    repository: "Repository",
    config: RetrievalConfig,
) -> RetrievalResult | None:
    """Top candidate passing both gates, or None (caller falls back).

    Ties break toward higher demographic match count, then lexicographically
    smaller case id.
    """
    from .caselib import SCHEMA_VERSION  # local import to avoid a cycle

    if repository.schema_version != SCHEMA_VERSION:
        raise ValidationError(
            f"repository schema version {repository.schema_version} "
            f"does not match supported version {SCHEMA_VERSION}"
        )
    if not repository.cases:
        return None
    query_vec = normalize(query, repository.standardization, config)
    query_raw = {f: float(getattr(query, f)) for f in CLINICAL_FEATURES}
    best: tuple | None = None
    for case in repository.cases:
        matches = demo_matches(query, case.sex, case.age_band, case.race)
        if matches < config.min_demo_matches:
            continue
        sim = similarity(
            query_vec,
            np.asarray(case.normalized_vector, dtype=float),
            query_raw,
            case.clinical,
            config,
        )
        if sim.similarity < config.min_similarity:
            continue
        rank = (-sim.similarity, -matches, case.id)
        if best is None or rank < best[0]:
            best = (rank, case, sim, matches)
    if best is None:
        return None
    _, case, sim, matches = best
    return RetrievalResult(
        case=case,
        similarity=sim.similarity,
        demo_matches=matches,
        crossed_features=sim.crossed,
    )
