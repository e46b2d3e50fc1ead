"""Latent-bias probe over model-reported key factors.

Canonicalizes free-text factor phrases into a fixed vocabulary, pools them
into per-subgroup frequency profiles, and compares profiles with top-k
Jaccard, all-feature Jaccard, cosine similarity and Jensen-Shannon
divergence (base-2 logs, so JS is bounded in [0, 1]).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .cohort import PatientRecord, SubgroupKey
from .errors import ValidationError

UNMAPPED = "other_unmapped"

_PUNCT = re.compile(r"[^a-z0-9]+")


def _normalize_phrase(phrase: str) -> str:
    return _PUNCT.sub(" ", phrase.lower()).strip()


# Built-in aliases: every clinical schema feature plus the common spellings
# of the severity scores and lab names.
DEFAULT_ALIASES = {
    "age": "age",
    "patient age": "age",
    "sex": "sex",
    "gender": "sex",
    "race": "race",
    "ethnicity": "race",
    "gcs": "gcs",
    "gcs score": "gcs",
    "glasgow coma scale": "gcs",
    "glasgow coma score": "gcs",
    "apache iii": "apache_iii",
    "apache iii score": "apache_iii",
    "apache score": "apache_iii",
    "sofa": "sofa_24h",
    "sofa 24h": "sofa_24h",
    "sofa score": "sofa_24h",
    "sofa score 24 h": "sofa_24h",
    "charlson": "charlson",
    "charlson index": "charlson",
    "charlson comorbidity index": "charlson",
    "comorbidity index": "charlson",
    "spo2": "spo2_min",
    "spo2 min": "spo2_min",
    "minimum spo2": "spo2_min",
    "oxygen saturation": "spo2_min",
    "heart rate": "heart_rate",
    "hr": "heart_rate",
    "resp rate": "resp_rate",
    "respiratory rate": "resp_rate",
    "map": "map_mean",
    "map mean": "map_mean",
    "mean arterial pressure": "map_mean",
    "creatinine": "creatinine_max",
    "creatinine max": "creatinine_max",
    "peak creatinine": "creatinine_max",
    "lactate": "lactate_max",
    "lactate max": "lactate_max",
    "peak lactate": "lactate_max",
    "troponin": "troponin_max",
    "troponin max": "troponin_max",
    "platelets": "platelet_min",
    "platelet min": "platelet_min",
    "platelet count": "platelet_min",
    "bilirubin": "bilirubin_max",
    "bilirubin max": "bilirubin_max",
    "wbc": "wbc_max",
    "wbc max": "wbc_max",
    "white blood cell count": "wbc_max",
    "urine output": "urine_24h",
    "urine 24h": "urine_24h",
    "24 hour urine output": "urine_24h",
    "mechanical ventilation": "mech_vent",
    "mech vent": "mech_vent",
    "code status": "code_status",
}


@dataclass
class FactorVocabulary:
    """Alias map from normalized raw phrases to canonical names."""

    aliases: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ALIASES))

    def __post_init__(self):
        self.aliases = {_normalize_phrase(k): v for k, v in self.aliases.items()}

    @property
    def canonical_names(self) -> list[str]:
        return sorted(set(self.aliases.values()))

    def lookup(self, phrase: str) -> str:
        key = _normalize_phrase(phrase)
        if key in self.aliases:
            return self.aliases[key]
        # a canonical name used verbatim maps to itself
        if key.replace(" ", "_") in set(self.aliases.values()):
            return key.replace(" ", "_")
        return UNMAPPED

    def extend_from_file(self, path: str) -> None:
        """Add aliases from a plain-text file: `raw phrase => canonical_name`."""
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=>" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected 'raw phrase => canonical_name'")
                raw, canonical = (part.strip() for part in line.split("=>", 1))
                if not raw or not canonical:
                    raise ValidationError(f"{path}:{lineno}: empty side in alias mapping")
                self.aliases[_normalize_phrase(raw)] = canonical


def canonicalize(raw_factors: list[str], vocab: FactorVocabulary) -> list[str]:
    """Map raw phrases to canonical names; unknown phrases become other_unmapped."""
    return [vocab.lookup(p) for p in raw_factors]


@dataclass
class RelianceProfile:
    subgroup: SubgroupKey
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def frequencies(self) -> dict[str, float]:
        total = self.total
        return {k: v / total for k, v in self.counts.items()}

    def top_k(self, k: int) -> set[str]:
        # most frequent first; ties broken lexicographically for determinism
        ordered = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {name for name, _ in ordered[:k]}

    def support(self) -> set[str]:
        return {k for k, v in self.counts.items() if v > 0}


def profile(
    predictions: list[tuple[PatientRecord, "PredictionRecord"]],
    key: SubgroupKey,
    vocab: FactorVocabulary,
    correct_only: bool = False,
    threshold: float = 0.5,
) -> RelianceProfile:
    """Pool canonicalized factors over all predictions in a subgroup."""
    counts: dict[str, int] = {}
    matched = 0
    for record, pred in predictions:
        if not key.matches(record):
            continue
        if correct_only:
            predicted_died = pred.mortality_probability >= threshold
            if predicted_died != record.died_in_hospital:
                continue
        matched += 1
        for name in canonicalize(list(pred.key_factors), vocab):
            counts[name] = counts.get(name, 0) + 1
    if matched == 0:
        raise ValidationError(f"empty subgroup {key.label()!r}")
    return RelianceProfile(subgroup=key, counts=counts)


@dataclass(frozen=True)
class RelianceSimilarity:
    topk_jaccard: float
    all_jaccard: float
    cosine: float
    js_divergence: float


def _jaccard(a: set, b: set) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def similarity(a: RelianceProfile, b: RelianceProfile, k: int = 3) -> RelianceSimilarity:
    """Top-k Jaccard, all-support Jaccard, cosine and JS divergence."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if a.total == 0 or b.total == 0:
        raise ValidationError("both profiles must have nonzero totals")
    union = sorted(a.support() | b.support())
    fa = a.frequencies()
    fb = b.frequencies()
    va = np.array([fa.get(name, 0.0) for name in union])
    vb = np.array([fb.get(name, 0.0) for name in union])
    cos = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    m = 0.5 * (va + vb)

    def kl(p, q):
        mask = p > 0
        return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))

    js = 0.5 * kl(va, m) + 0.5 * kl(vb, m)
    return RelianceSimilarity(
        topk_jaccard=_jaccard(a.top_k(k), b.top_k(k)),
        all_jaccard=_jaccard(a.support(), b.support()),
        cosine=min(max(cos, 0.0), 1.0),
        js_divergence=min(max(js, 0.0), 1.0),
    )
