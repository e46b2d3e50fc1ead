"""Run configuration: one TOML document, CLI overrides, and the config hash
that names run directories and stamps every output artifact.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baseline import FitConfig
from .client import DEFAULT_MOCK_WEIGHTS, EndpointConfig, MockSpec
from .cohort import BiasInjection
from .errors import ConfigError
from .retrieval import DEFAULT_INTERVALS, DEFAULT_LOG_FEATURES, RetrievalConfig

DEFAULTS: dict = {
    "run": {
        "seed": 7,
        "threshold": 0.5,
        "split_ratio": 0.7,
        "output_dir": "runs",
        "failure_cap": 0.01,
    },
    "cohort": {
        "n": 1000,
        "path": "",
        "bias": {},
    },
    "predictor": {
        "kind": "mock",
        "mock": {
            "weights": dict(DEFAULT_MOCK_WEIGHTS),
            "offsets": {},
            "cap_correction": True,
            "noise_seed": 0,
            "noise_scale": 0.15,
            "intercept": 0.0,
        },
        "endpoint": {
            "base_url": "",
            "model": "",
            "api_key_env": "FAIRCAP_API_KEY",
            "timeout": 30.0,
            "max_retries": 3,
            "max_in_flight": 4,
            "temperature": 0.0,
            "backoff_base": 0.5,
        },
    },
    "baseline": {
        "learning_rate": 0.1,
        "epochs": 500,
        "l2": 0.0,
    },
    "retrieval": {
        "weights": {},
        "log_features": list(DEFAULT_LOG_FEATURES),
        "intervals": {k: list(v) for k, v in DEFAULT_INTERVALS.items()},
        "penalty_rho": 0.9,
        "min_similarity": 0.8,
        "min_demo_matches": 2,
    },
    "cases": {
        "max_cases": 64,
        "delta": 0.1,
        "keep_unbiased": False,
    },
    "bootstrap": {
        "resamples": 500,
        "level": 0.95,
    },
    "report": {
        "strategies": ["base", "cap"],
    },
}

_PREDICTOR_KINDS = ("mock", "endpoint", "baseline")


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["run"]["seed"])

    @property
    def threshold(self) -> float:
        return float(self.raw["run"]["threshold"])

    @property
    def split_ratio(self) -> float:
        return float(self.raw["run"]["split_ratio"])

    @property
    def failure_cap(self) -> float:
        return float(self.raw["run"]["failure_cap"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["run"]["output_dir"])

    @property
    def cohort_n(self) -> int:
        return int(self.raw["cohort"]["n"])

    @property
    def cohort_path(self) -> str:
        return str(self.raw["cohort"]["path"])

    @property
    def predictor_kind(self) -> str:
        return str(self.raw["predictor"]["kind"])

    @property
    def strategies(self) -> list[str]:
        return list(self.raw["report"]["strategies"])

    def cohort_bias(self) -> BiasInjection | None:
        doc = self.raw["cohort"].get("bias") or {}
        if not doc:
            return None
        return BiasInjection(
            sex=dict(doc.get("sex", {})),
            age_band=dict(doc.get("age_band", {})),
            race=dict(doc.get("race", {})),
        )

    def mock_spec(self) -> MockSpec:
        doc = self.raw["predictor"]["mock"]
        offsets = doc.get("offsets") or {}
        return MockSpec(
            severity_weights=dict(doc["weights"]),
            demographic_offsets=BiasInjection(
                sex=dict(offsets.get("sex", {})),
                age_band=dict(offsets.get("age_band", {})),
                race=dict(offsets.get("race", {})),
            ),
            cap_correction=bool(doc["cap_correction"]),
            noise_seed=int(doc["noise_seed"]),
            noise_scale=float(doc["noise_scale"]),
            intercept=float(doc["intercept"]),
        )

    def endpoint_config(self) -> EndpointConfig:
        doc = self.raw["predictor"]["endpoint"]
        if not doc["base_url"]:
            raise ConfigError("predictor.endpoint.base_url is not configured")
        return EndpointConfig(
            base_url=str(doc["base_url"]),
            model=str(doc["model"]),
            api_key_env=str(doc["api_key_env"]),
            timeout=float(doc["timeout"]),
            max_retries=int(doc["max_retries"]),
            max_in_flight=int(doc["max_in_flight"]),
            temperature=float(doc["temperature"]),
            backoff_base=float(doc["backoff_base"]),
        )

    def retrieval_config(self) -> RetrievalConfig:
        doc = self.raw["retrieval"]
        return RetrievalConfig(
            weights={k: float(v) for k, v in doc["weights"].items()},
            log_features=tuple(doc["log_features"]),
            intervals={k: tuple(float(x) for x in v) for k, v in doc["intervals"].items()},
            penalty_rho=float(doc["penalty_rho"]),
            min_similarity=float(doc["min_similarity"]),
            min_demo_matches=int(doc["min_demo_matches"]),
        )

    def fit_config(self) -> FitConfig:
        doc = self.raw["baseline"]
        return FitConfig(
            learning_rate=float(doc["learning_rate"]),
            epochs=int(doc["epochs"]),
            l2=float(doc["l2"]),
            seed=self.seed,
        )

    @property
    def max_cases(self) -> int:
        return int(self.raw["cases"]["max_cases"])

    @property
    def judge_delta(self) -> float:
        return float(self.raw["cases"]["delta"])

    @property
    def keep_unbiased(self) -> bool:
        return bool(self.raw["cases"]["keep_unbiased"])

    @property
    def bootstrap_resamples(self) -> int:
        return int(self.raw["bootstrap"]["resamples"])

    @property
    def bootstrap_level(self) -> float:
        return float(self.raw["bootstrap"]["level"])

    def config_hash(self) -> str:
        """Hash of the semantic config (output location excluded)."""
        doc = copy.deepcopy(self.raw)
        doc["run"].pop("output_dir", None)
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return self.output_dir / f"run-{self.config_hash()[:12]}"


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- TOML file <- CLI overrides, validated."""
    merged = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                file_doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None
        merged = _deep_merge(merged, file_doc)
    if overrides:
        merged = _deep_merge(merged, overrides)
    config = RunConfig(raw=merged)
    if config.predictor_kind not in _PREDICTOR_KINDS:
        raise ConfigError(
            f"predictor.kind must be one of {_PREDICTOR_KINDS}, got {config.predictor_kind!r}"
        )
    if not 0.0 <= config.threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {config.threshold}")
    if not 0.0 < config.split_ratio < 1.0:
        raise ConfigError(f"split_ratio must be in (0, 1), got {config.split_ratio}")
    for strategy in config.strategies:
        if strategy not in ("base", "fairness", "system2", "cap", "baseline"):
            raise ConfigError(f"unknown strategy {strategy!r} in report.strategies")
    return config
