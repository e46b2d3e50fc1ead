"""Orchestration of the predict / build-cases / evaluate loop over persisted
artifacts. Prediction files are line-delimited JSON with a header line, so
evaluation is decoupled from (possibly expensive) model calls and every
report is re-derivable offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .baseline import LinearModel, load_model, predict_prob
from .caselib import Repository, build_repository, save_repository
from .client import MockSpec, complete, extract_content, mock_predict
from .cohort import PatientRecord
from .config import RunConfig
from .errors import (
    ConfigError,
    FailureCapExceeded,
    ParseError,
    TransportError,
    ValidationError,
)
from .judge import EndpointJudge, MockJudge
from .prompting import FALLBACK_KIND, PredictionRecord, build_prompt, parse_response, render_response
from .reliance import FactorVocabulary
from .reports import assemble_report
from .retrieval import RetrievalResult, retrieve

logger = logging.getLogger(__name__)

PREDICTIONS_SCHEMA_VERSION = 1


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_meta(artifact_path: Path, config: RunConfig, command: str) -> None:
    """Provenance sidecar for fixed-schema artifacts (cohort CSVs, models)."""
    meta = {
        "artifact": artifact_path.name,
        "command": command,
        "config_hash": config.config_hash(),
        "created_utc": utc_now(),
        "seed": config.seed,
    }
    with open(str(artifact_path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    record: PredictionRecord
    prompt_hash: str
    retrieval: RetrievalResult | None


class MockPredictor:
    def __init__(self, spec: MockSpec, config: RunConfig):
        self.spec = spec
        self.config = config

    def predict(self, patient: PatientRecord, strategy: str,
                analog: RetrievalResult | None) -> tuple[PredictionRecord, str]:
        effective = strategy
        if strategy == "cap" and analog is None:
            effective = FALLBACK_KIND
        built = build_prompt(patient, strategy, analog)
        raw = render_response(mock_predict(patient, effective, analog, self.spec))
        parsed = parse_response(raw, strategy=effective)
        return parsed, hashlib.sha256(built.text.encode("utf-8")).hexdigest()

    def probability_fn(self):
        """(patient) -> (probability, reasoning) under the base strategy."""
        def fn(patient: PatientRecord) -> tuple[float, str]:
            rec = mock_predict(patient, "base", None, self.spec)
            return rec.mortality_probability, rec.reasoning
        return fn


class EndpointPredictor:
    def __init__(self, config: RunConfig):
        self.endpoint = config.endpoint_config()

    def predict(self, patient: PatientRecord, strategy: str,
                analog: RetrievalResult | None) -> tuple[PredictionRecord, str]:
        effective = strategy
        if strategy == "cap" and analog is None:
            effective = FALLBACK_KIND
        built = build_prompt(patient, strategy, analog)
        prompt_hash = hashlib.sha256(built.text.encode("utf-8")).hexdigest()
        attempts = 0
        last_error: Exception | None = None
        while attempts < self.endpoint.max_retries + 1:
            attempts += 1
            result = complete(built.text, self.endpoint)
            try:
                parsed = parse_response(
                    extract_content(result.body), strategy=effective, parse_attempts=attempts
                )
                return parsed, prompt_hash
            except ParseError as exc:
                last_error = exc
        raise ParseError(f"unparsable response after {attempts} attempts: {last_error}")

    def probability_fn(self):
        def fn(patient: PatientRecord) -> tuple[float, str]:
            rec, _ = self.predict(patient, "base", None)
            return rec.mortality_probability, rec.reasoning
        return fn


class BaselinePredictor:
    def __init__(self, model: LinearModel):
        self.model = model

    def predict(self, patient: PatientRecord, strategy: str,
                analog: RetrievalResult | None) -> tuple[PredictionRecord, str]:
        prob = predict_prob(self.model, patient)
        contributions = sorted(
            (
                (
                    -abs(
                        self.model.weights[i]
                        * (float(getattr(patient, name)) - self.model.means[i])
                        / self.model.sds[i]
                    ),
                    name,
                )
                for i, name in enumerate(self.model.feature_order)
            ),
        )
        factors = tuple(name for _, name in contributions[:3])
        record = PredictionRecord(
            mortality_probability=prob,
            confidence=round(0.6 + 0.35 * abs(2.0 * prob - 1.0), 4),
            key_factors=factors,
            reasoning="linear comparator score over standardized clinical features",
            strategy="baseline",
        )
        return record, ""

    def probability_fn(self):
        def fn(patient: PatientRecord) -> tuple[float, str]:
            return predict_prob(self.model, patient), ""
        return fn


def make_predictor(config: RunConfig, model_path: Path | None = None):
    kind = config.predictor_kind
    if kind == "mock":
        return MockPredictor(config.mock_spec(), config)
    if kind == "endpoint":
        return EndpointPredictor(config)
    if kind == "baseline":
        if model_path is None or not Path(model_path).exists():
            raise ConfigError("baseline predictor needs a trained model file (train-baseline first)")
        return BaselinePredictor(load_model(str(model_path)))
    raise ConfigError(f"unknown predictor kind {kind!r}")


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def predictions_header(config: RunConfig, strategy: str, split_name: str) -> dict:
    return {
        "kind": "predictions",
        "schema_version": PREDICTIONS_SCHEMA_VERSION,
        "strategy": strategy,
        "split": split_name,
        "seed": config.seed,
        "threshold": config.threshold,
        "config_hash": config.config_hash(),
        "package_version": __version__,
    }


def load_predictions(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty prediction file")
    header = json.loads(lines[0])
    if header.get("kind") != "predictions":
        raise ValidationError(f"{path}: not a prediction file")
    return header, [json.loads(line) for line in lines[1:]]


def _prediction_row(
    patient: PatientRecord, prediction: Prediction
) -> dict:
    row = {
        "id": patient.id,
        "age": patient.age,
        "sex": patient.sex,
        "race": patient.race,
        "label": patient.died_in_hospital,
        "strategy": prediction.record.strategy,
        "prompt_hash": prediction.prompt_hash,
        "mortality_probability": prediction.record.mortality_probability,
        "confidence": prediction.record.confidence,
        "key_factors": list(prediction.record.key_factors),
        "reasoning": prediction.record.reasoning,
        "parse_attempts": prediction.record.parse_attempts,
        "clamped": prediction.record.clamped,
        "retrieval": None,
        "failed": False,
    }
    if prediction.retrieval is not None:
        row["retrieval"] = {
            "case_id": prediction.retrieval.case.id,
            "similarity": prediction.retrieval.similarity,
            "demo_matches": prediction.retrieval.demo_matches,
        }
    return row


def run_predict(
    config: RunConfig,
    cohort: list[PatientRecord],
    strategy: str,
    out_path: Path,
    split_name: str = "test",
    repository: Repository | None = None,
    model_path: Path | None = None,
    resume: bool = True,
) -> dict:
    """Predict for every cohort record, appending one JSON line per patient.

    Resumable: ids already present in the output file are skipped. Failed
    rows are recorded; the failure cap is enforced by the caller via the
    returned summary.
    """
    predictor = make_predictor(config, model_path=model_path)
    if strategy == "cap" and config.predictor_kind != "baseline" and repository is None:
        raise ConfigError("cap strategy requires a case repository (build-cases first)")
    retrieval_config = config.retrieval_config()

    done_ids: set[str] = set()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.exists() and resume:
        header, existing = load_predictions(out_path)
        if header.get("strategy") != strategy:
            raise ValidationError(
                f"{out_path}: cannot resume strategy {strategy!r} into a "
                f"{header.get('strategy')!r} prediction file"
            )
        done_ids = {row["id"] for row in existing}
        fh = open(out_path, "a", encoding="utf-8")
    else:
        fh = open(out_path, "w", encoding="utf-8")
        fh.write(json.dumps(predictions_header(config, strategy, split_name)) + "\n")
        fh.flush()

    def predict_one(patient: PatientRecord) -> dict:
        analog = None
        if strategy == "cap" and repository is not None:
            analog = retrieve(patient, repository, retrieval_config)
        try:
            record, prompt_hash = predictor.predict(patient, strategy, analog)
            return _prediction_row(patient, Prediction(record, prompt_hash, analog))
        except (ParseError, TransportError) as exc:
            return {
                "id": patient.id,
                "age": patient.age,
                "sex": patient.sex,
                "race": patient.race,
                "label": patient.died_in_hospital,
                "strategy": strategy,
                "failed": True,
                "error": str(exc),
            }

    pending = [p for p in cohort if p.id not in done_ids]
    new_rows = 0
    failures = 0
    fallbacks = 0
    # endpoint runs fan out with bounded concurrency; rows land in input order
    workers = config.endpoint_config().max_in_flight if config.predictor_kind == "endpoint" else 1
    try:
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                row_iter = pool.map(predict_one, pending)
                for row in row_iter:
                    failures += bool(row.get("failed"))
                    fallbacks += row.get("strategy") == FALLBACK_KIND
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                    new_rows += 1
        else:
            for patient in pending:
                row = predict_one(patient)
                failures += bool(row.get("failed"))
                fallbacks += row.get("strategy") == FALLBACK_KIND
                fh.write(json.dumps(row) + "\n")
                fh.flush()
                new_rows += 1
    finally:
        fh.close()

    total = new_rows + len(done_ids)
    summary = {
        "new_rows": new_rows,
        "skipped": len(done_ids),
        "failures": failures,
        "fallbacks": fallbacks,
        "total": total,
    }
    if total > 0 and failures / total > config.failure_cap:
        raise FailureCapExceeded(
            f"{failures}/{total} prediction failures exceed cap {config.failure_cap}"
        )
    return summary


# ---------------------------------------------------------------------------
# Case repository construction
# ---------------------------------------------------------------------------

def run_build_cases(
    config: RunConfig,
    train_predictions_path: Path,
    train_cohort: list[PatientRecord],
    out_path: Path,
    standardization,
    model_path: Path | None = None,
) -> Repository:
    """Judge mined training errors and persist the selected repository."""
    _, rows = load_predictions(train_predictions_path)
    by_id = {r.id: r for r in train_cohort}
    predictions = []
    for row in rows:
        if row.get("failed"):
            continue
        patient = by_id.get(row["id"])
        if patient is None:
            raise ValidationError(
                f"prediction row id {row['id']!r} not found in the training cohort"
            )
        predictions.append((patient, float(row["mortality_probability"])))
    predictor = make_predictor(config, model_path=model_path)
    if config.predictor_kind == "endpoint":
        judge_backend = EndpointJudge(config.endpoint_config())
    else:
        judge_backend = MockJudge(delta=config.judge_delta)
    repo = build_repository(
        predictions=predictions,
        threshold=config.threshold,
        judge_backend=judge_backend,
        predict_fn=predictor.probability_fn(),
        standardization=standardization,
        config=config.retrieval_config(),
        max_cases=config.max_cases,
        seed=config.seed,
        delta_hint=config.judge_delta,
        keep_unbiased=config.keep_unbiased,
    )
    repo.config_hash = config.config_hash()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_repository(repo, str(out_path))
    return repo


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def run_evaluate(
    config: RunConfig,
    prediction_paths: dict[str, Path],
    alias_file: Path | None = None,
) -> dict:
    """Assemble the bias report from persisted prediction files."""
    predictions = {}
    for strategy, path in prediction_paths.items():
        if not Path(path).exists():
            raise ConfigError(f"prediction file for strategy {strategy!r} not found: {path}")
        _, rows = load_predictions(path)
        predictions[strategy] = rows
    vocab = FactorVocabulary()
    if alias_file is not None:
        vocab.extend_from_file(str(alias_file))
    provenance = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "threshold": config.threshold,
        "created_utc": utc_now(),
        "package_version": __version__,
        "prediction_files": {s: str(p) for s, p in prediction_paths.items()},
    }
    return assemble_report(
        predictions,
        threshold=config.threshold,
        resamples=config.bootstrap_resamples,
        level=config.bootstrap_level,
        seed=config.seed,
        provenance=provenance,
        vocab=vocab,
    )
