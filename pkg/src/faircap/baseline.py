"""Logistic-regression comparator trained by full-batch gradient descent.

Stands in for a gradient-boosted baseline in reports and as a misprediction
source; self-contained so convergence and gradients are exactly testable.
Features are z-scored with training-set statistics, so predictions are
invariant to raw feature rescaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import CLINICAL_FEATURES, PatientRecord, sigmoid
from .errors import ValidationError


@dataclass
class FitConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 0.0
    seed: int = 0


@dataclass
class LinearModel:
    feature_order: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray
    bias: float
    seed: int = 0
    loss_history: list[float] = field(default_factory=list, repr=False)


def _design_matrix(records: list[PatientRecord], features: tuple[str, ...]) -> np.ndarray:
    return np.array([[float(getattr(r, f)) for f in features] for r in records])


def loss_and_gradient(
    X: np.ndarray, y: np.ndarray, weights: np.ndarray, bias: float, l2: float
) -> tuple[float, np.ndarray, float]:
    """L2-regularized mean logistic loss and its analytic gradient."""
    n = X.shape[0]
    logits = X @ weights + bias
    # log(1 + e^z) computed stably
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits)) + 0.5 * l2 * float(
        np.dot(weights, weights)
    )
    p = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    grad_w = X.T @ (p - y) / n + l2 * weights
    grad_b = float(np.mean(p - y))
    return loss, grad_w, grad_b


def fit(
    train: list[PatientRecord],
    config: FitConfig | None = None,
    features: tuple[str, ...] = CLINICAL_FEATURES,
) -> LinearModel:
    """Minimize regularized logistic loss by full-batch gradient descent."""
    config = config or FitConfig()
    if config.epochs < 1:
        raise ValidationError("fit requires epochs >= 1")
    y = np.array([float(r.died_in_hospital) for r in train])
    if len(np.unique(y)) < 2:
        raise ValidationError("training set must contain both outcome classes")
    raw = _design_matrix(train, features)
    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    if np.any(sds == 0.0):
        dead = [features[i] for i in np.flatnonzero(sds == 0.0)]
        raise ValidationError(f"zero-variance feature(s) in training data: {', '.join(dead)}")
    X = (raw - means) / sds

    weights = np.zeros(len(features))
    bias = 0.0
    history = []
    for epoch in range(config.epochs):
        loss, grad_w, grad_b = loss_and_gradient(X, y, weights, bias, config.l2)
        if not math.isfinite(loss):
            raise ValidationError(f"non-finite training loss at epoch {epoch}")
        history.append(loss)
        weights = weights - config.learning_rate * grad_w
        bias = bias - config.learning_rate * grad_b
    return LinearModel(
        feature_order=tuple(features),
        means=means,
        sds=sds,
        weights=weights,
        bias=bias,
        seed=config.seed,
        loss_history=history,
    )


def predict_prob(model: LinearModel, patient: PatientRecord) -> float:
    """sigmoid(bias + sum(w_i * z_i)), strictly inside (0, 1)."""
    logit = model.bias
    for i, name in enumerate(model.feature_order):
        try:
            value = float(getattr(patient, name))
        except AttributeError:
            raise ValidationError(f"patient {patient.id} missing model feature {name!r}") from None
        logit += model.weights[i] * (value - model.means[i]) / model.sds[i]
    return sigmoid(logit)


def save_model(model: LinearModel, path: str) -> None:
    """Persist as a self-describing key-value text document."""
    doc = {
        "kind": "logistic_regression",
        "feature_order": list(model.feature_order),
        "means": [float(v) for v in model.means],
        "sds": [float(v) for v in model.sds],
        "weights": [float(v) for v in model.weights],
        "bias": float(model.bias),
        "seed": model.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str) -> LinearModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "logistic_regression":
        raise ValidationError(f"{path}: not a model document")
    sds = np.array(doc["sds"], dtype=float)
    if np.any(sds <= 0.0):
        raise ValidationError(f"{path}: model document has non-positive sd")
    return LinearModel(
        feature_order=tuple(doc["feature_order"]),
        means=np.array(doc["means"], dtype=float),
        sds=sds,
        weights=np.array(doc["weights"], dtype=float),
        bias=float(doc["bias"]),
        seed=int(doc.get("seed", 0)),
    )
