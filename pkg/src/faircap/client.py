"""Transport to chat-completion endpoints plus the deterministic mock
predictor family used for offline runs and tests.

The mock realizes controllable demographic bias: a logistic score over
standardized severity features plus configurable per-demographic logit
offsets. Offsets apply to the base/fairness/system2 strategies; under the
case strategy with cap_correction enabled, a retrieved analog carrying a
bias label makes the mock drop its demographic offsets entirely (the
bias warning generalizes, matching how the audited misprediction is meant
to correct demographic reasoning).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass, field

import requests

from .cohort import CLINICAL_FEATURES, GENERATOR_MARGINALS, BiasInjection, PatientRecord, sigmoid
from .errors import ConfigError, TransportError, ValidationError
from .prompting import FALLBACK_KIND, STRATEGIES, PredictionRecord
from .retrieval import RetrievalResult

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "FAIRCAP_API_KEY"


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float = 0.0
    backoff_base: float = 0.5
    max_prompt_chars: int = 100_000
    debug: bool = False

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValidationError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class CompletionResult:
    body: str
    attempts: int


def _resolve_key(endpoint: EndpointConfig) -> str | None:
    if not endpoint.api_key_env:
        return None
    key = os.environ.get(endpoint.api_key_env)
    if key is None:
        raise ConfigError(
            f"API key environment variable {endpoint.api_key_env!r} is not set"
        )
    return key


def request_body(prompt: str, endpoint: EndpointConfig) -> bytes:
    """Canonical request payload; byte-stable for a fixed prompt and config."""
    doc = {
        "messages": [{"content": prompt, "role": "user"}],
        "model": endpoint.model,
        "temperature": endpoint.temperature,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def complete(prompt: str, endpoint: EndpointConfig) -> CompletionResult:
    """POST the prompt, retrying transport failures with backoff + jitter.

    Returns the raw response body verbatim; pair with extract_content() to
    unwrap chat-completion JSON before parsing.
    """
    if len(prompt) > endpoint.max_prompt_chars:
        raise ConfigError(
            f"prompt length {len(prompt)} exceeds max_prompt_chars {endpoint.max_prompt_chars}"
        )
    key = _resolve_key(endpoint)  # fail fast, before any network call
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = request_body(prompt, endpoint)
    if endpoint.debug:
        logger.debug("request %s body=%s", url, body.decode("utf-8"))
    attempt_log: list[str] = []
    total_attempts = endpoint.max_retries + 1
    for attempt in range(1, total_attempts + 1):
        try:
            resp = requests.post(url, data=body, headers=headers, timeout=endpoint.timeout)
            if resp.status_code == 200:
                if endpoint.debug:
                    logger.debug("response attempt=%d body=%s", attempt, resp.text)
                return CompletionResult(body=resp.text, attempts=attempt)
            attempt_log.append(f"attempt {attempt}: HTTP {resp.status_code}")
        except requests.RequestException as exc:
            attempt_log.append(f"attempt {attempt}: {type(exc).__name__}: {exc}")
        if attempt < total_attempts:
            delay = endpoint.backoff_base * (2 ** (attempt - 1))
            time.sleep(delay * (1.0 + random.random()))
    raise TransportError(
        f"endpoint failed after {total_attempts} attempts: {attempt_log[-1]}",
        attempts=total_attempts,
        attempt_log=attempt_log,
    )


def complete_many(prompts: list[str], endpoint: EndpointConfig) -> list[CompletionResult]:
    """Bounded-concurrency fan-out; results in input order."""
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
        return list(pool.map(lambda p: complete(p, endpoint), prompts))


def extract_content(body: str) -> str:
    """Unwrap a chat-completion JSON body to the assistant text, else pass through."""
    try:
        doc = json.loads(body)
    except json.JSONDecodeError:
        return body
    if isinstance(doc, dict) and "choices" in doc:
        try:
            choice = doc["choices"][0]
            if "message" in choice:
                return str(choice["message"]["content"])
            if "text" in choice:
                return str(choice["text"])
        except (KeyError, IndexError, TypeError):
            return body
    return body


# ---------------------------------------------------------------------------
# Deterministic mock predictor
# ---------------------------------------------------------------------------

DEFAULT_MOCK_WEIGHTS = {
    "sofa_24h": 0.16,
    "apache_iii": 0.12,
    "lactate_max": 0.10,
    "charlson": 0.07,
    "gcs": -0.06,
}


@dataclass
class MockSpec:
    """Analytically controllable stand-in for an LLM predictor."""

    severity_weights: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_MOCK_WEIGHTS)
    )
    demographic_offsets: BiasInjection = field(default_factory=BiasInjection)
    cap_correction: bool = True
    noise_seed: int = 0
    noise_scale: float = 0.15
    intercept: float = 0.0
    # reference (mean, sd) per feature for z-scoring; population defaults
    reference: dict[str, tuple[float, float]] = field(
        default_factory=lambda: dict(GENERATOR_MARGINALS)
    )

    def __post_init__(self):
        for name in self.severity_weights:
            if name not in CLINICAL_FEATURES:
                raise ValidationError(f"mock weight for unknown feature {name!r}")


def _stable_unit(seed: int, patient_id: str) -> float:
    digest = hashlib.sha256(f"{seed}:{patient_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def mock_logit(patient: PatientRecord, spec: MockSpec, offsets_active: bool) -> float:
    z_contrib = {}
    for name, weight in spec.severity_weights.items():
        mean, sd = spec.reference[name]
        z_contrib[name] = weight * (float(getattr(patient, name)) - mean) / sd
    logit = spec.intercept + sum(z_contrib.values())
    logit += (_stable_unit(spec.noise_seed, patient.id) - 0.5) * 2.0 * spec.noise_scale
    if offsets_active:
        logit += spec.demographic_offsets.offset_for(
            patient.sex, patient.age_band, patient.race
        )
    return logit


def mock_predict(
    patient: PatientRecord,
    kind: str,
    analog: RetrievalResult | None = None,
    spec: MockSpec | None = None,
) -> PredictionRecord:
    """Pure function of (patient, kind, analog, spec); replay-stable."""
    spec = spec or MockSpec()
    if kind not in STRATEGIES and kind != FALLBACK_KIND:
        raise ValidationError(f"unknown strategy {kind!r}")
    corrected = (
        kind == "cap"
        and spec.cap_correction
        and analog is not None
        and analog.case.bias_type != "none"
    )
    logit = mock_logit(patient, spec, offsets_active=not corrected)
    prob = sigmoid(logit)

    contributions = []
    for name, weight in spec.severity_weights.items():
        mean, sd = spec.reference[name]
        contributions.append((abs(weight * (float(getattr(patient, name)) - mean) / sd), name))
    remaining = [n for n in CLINICAL_FEATURES if n not in spec.severity_weights]
    contributions.extend((0.0, n) for n in remaining)
    contributions.sort(key=lambda t: (-t[0], t[1]))
    factors = tuple(name for _, name in contributions[:3])

    confidence = round(0.6 + 0.35 * abs(2.0 * prob - 1.0), 4)
    reasoning = (
        f"Risk synthesis from severity indicators: {factors[0]}, {factors[1]} and "
        f"{factors[2]} dominate the estimate."
    )
    if corrected:
        reasoning += (
            " A similar audited case warned against demographic reasoning "
            f"({analog.case.bias_type}); the estimate uses clinical evidence only."
        )
    return PredictionRecord(
        mortality_probability=prob,
        confidence=confidence,
        key_factors=factors,
        reasoning=reasoning,
        strategy=kind,
    )
