"""Prompt assembly for the four strategies and structured-response parsing.

Every prompt uses the same four-section skeleton (role definition, task
description, decision constraints, case information). The fairness strategy
prepends a fairness prefix to the base prompt; the stepwise strategy adds
slow-thinking instructions on top of that; the case strategy additionally
fills the case-information section with the retrieved analog. Templates are
plain text files with named placeholders and can be overridden per run.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .cohort import PatientRecord
from .errors import ParseError, ValidationError
from .retrieval import RetrievalResult

STRATEGIES = ("base", "fairness", "system2", "cap")
FALLBACK_KIND = "system2-fallback"

_TEMPLATE_DIR = Path(__file__).parent / "templates"
_TEMPLATE_NAMES = (
    "role",
    "task",
    "constraints",
    "fairness_prefix",
    "steps",
    "case_info",
    "fallback_note",
)

_SECTION_HEADERS = {
    "role_definition": "=== ROLE DEFINITION ===",
    "task_description": "=== TASK DESCRIPTION ===",
    "decision_constraints": "=== DECISION CONSTRAINTS ===",
    "case_information": "=== CASE INFORMATION ===",
}

# fixed rendering precision: one decimal for scores/vitals, two for labs
_SCORE_FIELDS = (
    ("GCS", "gcs"),
    ("APACHE III", "apache_iii"),
    ("SOFA (24h)", "sofa_24h"),
    ("Charlson index", "charlson"),
)
_VITAL_FIELDS = (
    ("SpO2 min (%)", "spo2_min"),
    ("Heart rate (beats/min)", "heart_rate"),
    ("Respiratory rate (breaths/min)", "resp_rate"),
    ("Mean arterial pressure (mmHg)", "map_mean"),
)
_LAB_FIELDS = (
    ("Creatinine max (mg/dL)", "creatinine_max"),
    ("Lactate max (mmol/L)", "lactate_max"),
    ("Troponin max (ng/mL)", "troponin_max"),
    ("Platelet min (10^3/uL)", "platelet_min"),
    ("Bilirubin max (mg/dL)", "bilirubin_max"),
    ("WBC max (10^3/uL)", "wbc_max"),
    ("Urine output 24h (mL)", "urine_24h"),
)


@functools.lru_cache(maxsize=8)
def _load_templates_cached(base: Path) -> dict[str, str]:
    templates = {}
    for name in _TEMPLATE_NAMES:
        path = base / f"{name}.txt"
        if not path.exists():
            raise ValidationError(f"missing prompt template {path}")
        templates[name] = path.read_text(encoding="utf-8").rstrip("\n")
    return templates


def load_templates(template_dir: str | Path | None = None) -> dict[str, str]:
    base = Path(template_dir) if template_dir is not None else _TEMPLATE_DIR
    return dict(_load_templates_cached(base))


def _render_patient_block(patient: PatientRecord) -> str:
    lines = [
        f"- Age: {patient.age} years",
        f"- Sex: {patient.sex}",
        f"- Race: {patient.race}",
    ]
    for label, attr in _SCORE_FIELDS + _VITAL_FIELDS:
        lines.append(f"- {label}: {float(getattr(patient, attr)):.1f}")
    for label, attr in _LAB_FIELDS:
        lines.append(f"- {label}: {float(getattr(patient, attr)):.2f}")
    lines.append(f"- Mechanical ventilation: {'yes' if patient.mech_vent else 'no'}")
    lines.append(f"- Code status order: {'yes' if patient.code_status else 'no'}")
    return "\n".join(lines)


def _render_case_block(case) -> str:
    lines = [
        f"- Demographics: {case.age_band} years, {case.sex}, {case.race}",
    ]
    for label, attr in _SCORE_FIELDS + _VITAL_FIELDS:
        lines.append(f"- {label}: {case.clinical[attr]:.1f}")
    for label, attr in _LAB_FIELDS:
        lines.append(f"- {label}: {case.clinical[attr]:.2f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptSections:
    role_definition: str
    task_description: str
    decision_constraints: str
    case_information: str  # empty unless the case strategy has an analog


@dataclass(frozen=True)
class BuiltPrompt:
    text: str
    kind: str  # effective strategy, may be "system2-fallback"
    requested_kind: str
    sections: PromptSections


def build_prompt(
    patient: PatientRecord,
    kind: str,
    analog: RetrievalResult | None = None,
    template_dir: str | Path | None = None,
) -> BuiltPrompt:
    """Deterministic prompt text for one patient under one strategy."""
    if kind not in STRATEGIES:
        raise ValidationError(f"unknown strategy {kind!r} (choose from {STRATEGIES})")
    templates = load_templates(template_dir)

    effective = kind
    case_information = ""
    constraints = templates["constraints"].format()
    if kind in ("system2", "cap"):
        constraints = constraints + "\n\n" + templates["steps"]
    if kind == "cap":
        if analog is None:
            effective = FALLBACK_KIND
            constraints = constraints + "\n\n" + templates["fallback_note"]
        else:
            case_information = templates["case_info"].format(
                case_block=_render_case_block(analog.case),
                outcome="died in hospital" if analog.case.true_outcome else "survived",
                bias_type=analog.case.bias_type,
            )

    sections = PromptSections(
        role_definition=templates["role"],
        task_description=templates["task"].format(patient_block=_render_patient_block(patient)),
        decision_constraints=constraints,
        case_information=case_information,
    )
    body = "\n\n".join(
        filter(
            None,
            [
                _SECTION_HEADERS["role_definition"],
                sections.role_definition,
                _SECTION_HEADERS["task_description"],
                sections.task_description,
                _SECTION_HEADERS["decision_constraints"],
                sections.decision_constraints,
                _SECTION_HEADERS["case_information"],
                sections.case_information,
            ],
        )
    )
    text = body + "\n"
    if kind != "base":
        text = templates["fairness_prefix"] + "\n\n" + text
    return BuiltPrompt(text=text, kind=effective, requested_kind=kind, sections=sections)


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    mortality_probability: float
    confidence: float
    key_factors: tuple[str, str, str]
    reasoning: str
    strategy: str
    parse_attempts: int = 1
    clamped: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mortality_probability <= 1.0:
            raise ValidationError(f"probability {self.mortality_probability} outside [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        if len(self.key_factors) != 3:
            raise ValidationError("exactly three key factors required")


_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_fenced_json(raw: str) -> dict | None:
    """First fenced block that parses as a JSON object, else None."""
    for match in _FENCE.finditer(raw):
        try:
            doc = json.loads(match.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict):
            return doc
    return None


def scan_line_value(raw: str, key: str) -> str | None:
    """Value of the first `key: value` line (case-insensitive), else None."""
    pattern = re.compile(rf"^\s*[-*]?\s*\"?{re.escape(key)}\"?\s*[:=]\s*(.+?)\s*,?\s*$", re.IGNORECASE)
    for line in raw.splitlines():
        m = pattern.match(line)
        if m:
            return m.group(1).strip().strip('"')
    return None


def _coerce_factors(factors) -> tuple[list[str], bool]:
    """Exactly three factor phrases; pad/truncate if the response strays."""
    cleaned = [str(f).strip() for f in factors if str(f).strip()]
    adjusted = len(cleaned) != 3
    cleaned = cleaned[:3]
    while len(cleaned) < 3:
        cleaned.append("unspecified")
    return cleaned, adjusted


def _scan_fallback(raw: str) -> dict | None:
    prob_text = scan_line_value(raw, "mortality_probability") or scan_line_value(raw, "probability")
    if prob_text is None:
        return None
    try:
        prob = float(prob_text)
    except ValueError:
        return None
    conf_text = scan_line_value(raw, "confidence")
    try:
        conf = float(conf_text) if conf_text is not None else 0.5
    except ValueError:
        conf = 0.5
    bullets = [
        line.strip().lstrip("-*").strip()
        for line in raw.splitlines()
        if line.strip().startswith(("-", "*")) and ":" not in line
    ]
    reasoning = scan_line_value(raw, "reasoning") or raw.strip()
    return {
        "mortality_probability": prob,
        "confidence": conf,
        "key_factors": bullets,
        "reasoning": reasoning,
    }


def parse_response(raw: str, strategy: str = "base", parse_attempts: int = 1) -> PredictionRecord:
    """Parse a model response into a PredictionRecord.

    The first well-formed fenced JSON block wins; otherwise a line-pattern
    scan for `probability: <number>` plus bulleted factors. Out-of-range
    probabilities are clamped into [0, 1] with the clamp flag set.
    """
    if not raw or not raw.strip():
        raise ParseError("empty response")
    doc = extract_fenced_json(raw)
    if doc is None or "mortality_probability" not in doc:
        doc = _scan_fallback(raw)
    if doc is None:
        raise ParseError("no parsable probability in response")
    try:
        prob = float(doc["mortality_probability"])
        conf = float(doc.get("confidence", 0.5))
    except (TypeError, ValueError):
        raise ParseError("probability or confidence is not numeric") from None
    clamped = False
    if not 0.0 <= prob <= 1.0:
        prob = min(max(prob, 0.0), 1.0)
        clamped = True
    if not 0.0 <= conf <= 1.0:
        conf = min(max(conf, 0.0), 1.0)
        clamped = True
    factors, _ = _coerce_factors(doc.get("key_factors", []))
    return PredictionRecord(
        mortality_probability=prob,
        confidence=conf,
        key_factors=tuple(factors),
        reasoning=str(doc.get("reasoning", "")).strip(),
        strategy=strategy,
        parse_attempts=parse_attempts,
        clamped=clamped,
    )


def render_response(record: PredictionRecord) -> str:
    """Well-formed response text; parse_response(render_response(r)) is r."""
    doc = {
        "mortality_probability": record.mortality_probability,
        "confidence": record.confidence,
        "key_factors": list(record.key_factors),
        "reasoning": record.reasoning,
    }
    return "```json\n" + json.dumps(doc) + "\n```\n"
