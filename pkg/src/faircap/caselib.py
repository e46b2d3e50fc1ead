"""Case repository construction: FN/FP mining from training-split
predictions, counterfactual demographic variants, judge verdicts, and the
persisted line-delimited repository with cached normalized vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .cohort import CLINICAL_FEATURES, RACES, PatientRecord, age_band
from .errors import ValidationError
from .judge import CounterfactualEntry, JudgeRequest, JudgeVerdict, judge as run_judge
from .retrieval import RetrievalConfig, Standardization, normalize

SCHEMA_VERSION = 1

ERROR_TYPES = ("false_negative", "false_positive")

AGE_REFLECTION_PIVOT = 119  # reflect around 59.5: variant age = 119 - age
AGE_CLAMP = (18, 95)


@dataclass(frozen=True)
class CounterfactualPair:
    original: PatientRecord
    variant: PatientRecord
    flipped_attribute: str  # sex | age_band | race
    variant_value: str


def make_counterfactuals(patient: PatientRecord) -> list[CounterfactualPair]:
    """One variant per alternate demographic value: 1 sex + 1 age band + 3 race."""
    pairs: list[CounterfactualPair] = []
    other_sex = "female" if patient.sex == "male" else "male"
    pairs.append(
        CounterfactualPair(
            original=patient,
            variant=replace(patient, sex=other_sex),
            flipped_attribute="sex",
            variant_value=other_sex,
        )
    )
    new_age = min(max(AGE_REFLECTION_PIVOT - patient.age, AGE_CLAMP[0]), AGE_CLAMP[1])
    pairs.append(
        CounterfactualPair(
            original=patient,
            variant=replace(patient, age=new_age),
            flipped_attribute="age_band",
            variant_value=age_band(new_age),
        )
    )
    for race in RACES:
        if race == patient.race:
            continue
        pairs.append(
            CounterfactualPair(
                original=patient,
                variant=replace(patient, race=race),
                flipped_attribute="race",
                variant_value=race,
            )
        )
    return pairs


def mine_errors(
    predictions: list[tuple[PatientRecord, float]], threshold: float
) -> list[tuple[PatientRecord, float, str]]:
    """Misclassified records at the threshold, tagged FN/FP, order preserved."""
    mined = []
    for record, score in predictions:
        predicted_died = score >= threshold
        if record.died_in_hospital and not predicted_died:
            mined.append((record, score, "false_negative"))
        elif not record.died_in_hospital and predicted_died:
            mined.append((record, score, "false_positive"))
    return mined


def case_summary(patient: PatientRecord) -> str:
    """Short clinical summary used in judge requests."""
    return (
        f"{patient.age}-year-old {patient.race} {patient.sex}; "
        f"GCS {patient.gcs}, APACHE III {patient.apache_iii}, SOFA {patient.sofa_24h}, "
        f"Charlson {patient.charlson}, lactate {patient.lactate_max:.2f}, "
        f"creatinine {patient.creatinine_max:.2f}"
    )


def judge_case(
    observations: list[tuple[CounterfactualPair, float, str]],
    original_probability: float,
    backend,
    delta_hint: float = 0.1,
) -> JudgeVerdict:
    """Delegate a judged comparison of a case against its counterfactuals.

    observations carry (pair, variant probability, variant reasoning) for
    every counterfactual member.
    """
    if not observations:
        raise ValidationError("judge_case needs at least one counterfactual observation")
    entries = tuple(
        CounterfactualEntry(
            flipped_attribute=pair.flipped_attribute,
            variant_value=pair.variant_value,
            probability=prob,
            reasoning=reasoning,
        )
        for pair, prob, reasoning in observations
    )
    request = JudgeRequest(
        original_summary=case_summary(observations[0][0].original),
        original_probability=original_probability,
        counterfactuals=entries,
        delta_hint=delta_hint,
    )
    return run_judge(request, backend)


@dataclass(frozen=True)
class CaseRecord:
    id: str
    sex: str
    age_band: str
    race: str
    clinical: dict[str, float]
    true_outcome: bool
    predicted_probability: float
    error_type: str
    bias_type: str
    judge_rationale: str
    normalized_vector: tuple[float, ...]

    def __post_init__(self):
        if self.error_type not in ERROR_TYPES:
            raise ValidationError(f"case {self.id}: unknown error type {self.error_type!r}")
        if set(self.clinical) != set(CLINICAL_FEATURES):
            raise ValidationError(f"case {self.id}: clinical feature set mismatch")
        if len(self.normalized_vector) != len(CLINICAL_FEATURES):
            raise ValidationError(f"case {self.id}: normalized vector length mismatch")
        if not all(np.isfinite(v) for v in self.normalized_vector):
            raise ValidationError(f"case {self.id}: non-finite normalized vector")

    def check_error_consistency(self, threshold: float) -> None:
        predicted_died = self.predicted_probability >= threshold
        if self.error_type == "false_negative" and not (self.true_outcome and not predicted_died):
            raise ValidationError(f"case {self.id}: inconsistent false_negative tag")
        if self.error_type == "false_positive" and not (not self.true_outcome and predicted_died):
            raise ValidationError(f"case {self.id}: inconsistent false_positive tag")


def _build_case(
    record: PatientRecord,
    score: float,
    error_type: str,
    verdict: JudgeVerdict,
    standardization: Standardization,
    config: RetrievalConfig,
) -> CaseRecord:
    vec = normalize(record, standardization, config)
    return CaseRecord(
        id=record.id,
        sex=record.sex,
        age_band=record.age_band,
        race=record.race,
        clinical={f: float(getattr(record, f)) for f in CLINICAL_FEATURES},
        true_outcome=record.died_in_hospital,
        predicted_probability=score,
        error_type=error_type,
        bias_type=verdict.bias_type,
        judge_rationale=verdict.rationale,
        normalized_vector=tuple(float(v) for v in vec),
    )


def _round_robin_select(
    cases: list[CaseRecord], limit: int, rng: np.random.Generator
) -> list[CaseRecord]:
    """Stratified coverage over (error_type, bias_type, race) cells."""
    cells: dict[tuple, list[CaseRecord]] = {}
    for case in cases:
        cells.setdefault((case.error_type, case.bias_type, case.race), []).append(case)
    for key in cells:
        order = rng.permutation(len(cells[key]))
        cells[key] = [cells[key][i] for i in order]
    selected: list[CaseRecord] = []
    keys = sorted(cells)
    while len(selected) < limit and any(cells[k] for k in keys):
        for key in keys:
            if len(selected) >= limit:
                break
            if cells[key]:
                selected.append(cells[key].pop(0))
    return selected


def build_repository(
    predictions: list[tuple[PatientRecord, float]],
    threshold: float,
    judge_backend,
    predict_fn: Callable[[PatientRecord], tuple[float, str]],
    standardization: Standardization,
    config: RetrievalConfig,
    max_cases: int = 64,
    seed: int = 0,
    delta_hint: float = 0.1,
    keep_unbiased: bool = False,
    judge_concurrency: int = 4,
) -> "Repository":
    """Mine, judge and select cases into a Repository.

    Judging runs with bounded concurrency (verdicts aggregated in input
    order, so the result is deterministic). Biased cases are kept
    preferentially; selection fills up to max_cases with round-robin
    coverage over (error_type x bias_type x race) cells, deterministic
    per seed.
    """
    from concurrent.futures import ThreadPoolExecutor

    mined = mine_errors(predictions, threshold)
    if not mined:
        raise ValidationError(
            "no misclassified training cases at this threshold; review the threshold"
        )

    def judge_one(item):
        record, score, error_type = item
        observations = []
        for pair in make_counterfactuals(record):
            prob, reasoning = predict_fn(pair.variant)
            observations.append((pair, prob, reasoning))
        return judge_case(observations, score, judge_backend, delta_hint)

    with ThreadPoolExecutor(max_workers=max(1, judge_concurrency)) as pool:
        verdicts = list(pool.map(judge_one, mined))

    biased: list[CaseRecord] = []
    unbiased: list[CaseRecord] = []
    for (record, score, error_type), verdict in zip(mined, verdicts):
        case = _build_case(record, score, error_type, verdict, standardization, config)
        (biased if verdict.biased else unbiased).append(case)

    rng = np.random.default_rng(seed)
    selected = _round_robin_select(biased, max_cases, rng)
    if keep_unbiased and len(selected) < max_cases:
        selected.extend(_round_robin_select(unbiased, max_cases - len(selected), rng))
    return Repository(
        schema_version=SCHEMA_VERSION,
        standardization=standardization,
        threshold=threshold,
        seed=seed,
        cases=selected,
    )


@dataclass
class Repository:
    schema_version: int
    standardization: Standardization
    threshold: float
    seed: int
    cases: list[CaseRecord]
    config_hash: str = ""


def save_repository(repo: Repository, path: str) -> None:
    """One header line plus one case per line, fixed field order."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "case_repository",
            "schema_version": repo.schema_version,
            "threshold": repo.threshold,
            "seed": repo.seed,
            "config_hash": repo.config_hash,
            "standardization": repo.standardization.to_dict(),
        }
        fh.write(json.dumps(header) + "\n")
        for case in repo.cases:
            row = {
                "id": case.id,
                "sex": case.sex,
                "age_band": case.age_band,
                "race": case.race,
                "true_outcome": case.true_outcome,
                "predicted_probability": case.predicted_probability,
                "error_type": case.error_type,
                "bias_type": case.bias_type,
                "judge_rationale": case.judge_rationale,
                "clinical": {f: case.clinical[f] for f in CLINICAL_FEATURES},
                "normalized_vector": list(case.normalized_vector),
            }
            fh.write(json.dumps(row) + "\n")


def load_repository(path: str) -> Repository:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty repository file")
    header = json.loads(lines[0])
    if header.get("kind") != "case_repository":
        raise ValidationError(f"{path}: not a case repository file")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: schema version {header.get('schema_version')} "
            f"not supported (expected {SCHEMA_VERSION})"
        )
    threshold = float(header["threshold"])
    cases = []
    for line in lines[1:]:
        doc = json.loads(line)
        case = CaseRecord(
            id=doc["id"],
            sex=doc["sex"],
            age_band=doc["age_band"],
            race=doc["race"],
            clinical={k: float(v) for k, v in doc["clinical"].items()},
            true_outcome=bool(doc["true_outcome"]),
            predicted_probability=float(doc["predicted_probability"]),
            error_type=doc["error_type"],
            bias_type=doc["bias_type"],
            judge_rationale=doc.get("judge_rationale", ""),
            normalized_vector=tuple(float(v) for v in doc["normalized_vector"]),
        )
        case.check_error_consistency(threshold)
        cases.append(case)
    return Repository(
        schema_version=int(header["schema_version"]),
        standardization=Standardization.from_dict(header["standardization"]),
        threshold=threshold,
        seed=int(header["seed"]),
        cases=cases,
        config_hash=header.get("config_hash", ""),
    )
