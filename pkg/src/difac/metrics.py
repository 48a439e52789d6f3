"""Accuracy, pseudo-label accuracy, and the conceit (overconfidence) metric."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MetricError


def accuracy(predicted, labels, mask=None) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    mask = np.arange(len(labels)) if mask is None else np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise MetricError("accuracy over an empty mask")
    return float(np.mean(predicted[mask] == labels[mask]))


def pseudo_accuracy(selected, labels) -> float:
    """Fraction of adopted pseudo-labels matching the held-out truth."""
    if len(selected) == 0:
        raise MetricError("pseudo-label set is empty")
    return float(np.mean(np.asarray(labels)[selected.nodes] == selected.classes))


@dataclass
class ConceitResult:
    mean: float
    total: float
    count: int


def _cosine(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    denom = np.linalg.norm(rows, axis=1) * np.linalg.norm(vec)
    num = rows @ vec
    out = np.zeros(len(rows))
    np.divide(num, denom, out=out, where=denom > 0)
    return out


def conceit_detail(z, predicted, labels, mask, confidence=None,
                   threshold: float | None = None) -> ConceitResult:
    """Cosine pull of misclassified nodes toward their predicted class.

    For each misclassified node in ``mask`` with true class ``c`` and
    predicted ``k`` this adds ``cos(z_i, mu_k) - cos(z_i, mu_c)``, where
    ``mu`` sums the representations of correctly classified ``mask`` nodes
    of a class. With ``threshold`` only nodes whose ``confidence`` exceeds it
    are counted.
    """
    z = np.asarray(z, dtype=np.float64)
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    mask = np.asarray(mask, dtype=np.int64)
    right = mask[predicted[mask] == labels[mask]]
    wrong = mask[predicted[mask] != labels[mask]]
    if threshold is not None:
        wrong = wrong[np.asarray(confidence)[wrong] > threshold]
    if len(wrong) == 0:
        return ConceitResult(0.0, 0.0, 0)
    centroids = {}
    for cls in np.unique(np.concatenate([predicted[wrong], labels[wrong]])):
        members = right[labels[right] == cls]
        if len(members) == 0:
            raise MetricError(f"class {int(cls)} has no correctly classified nodes")
        centroids[int(cls)] = z[members].sum(axis=0)
    gaps = np.empty(len(wrong))
    for j, i in enumerate(wrong):
        row = z[i:i + 1]
        gaps[j] = (_cosine(row, centroids[int(predicted[i])])[0]
                   - _cosine(row, centroids[int(labels[i])])[0])
    return ConceitResult(float(gaps.mean()), float(gaps.sum()), len(wrong))


def conceit(z, predicted, labels, mask, confidence=None, threshold: float | None = None) -> float:
    return conceit_detail(z, predicted, labels, mask, confidence, threshold).mean


def config_digest(config: dict) -> str:
    """Order-independent digest of a JSON-able configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsRecord:
    run_id: str
    dataset: str
    method: str
    seed: int
    config_digest: str
    test_acc: float | None = None
    val_acc: float | None = None
    pseudo_acc: float | None = None
    conceit: float | None = None
    conceit_sum: float | None = None
    status: str = "ok"
    error: str | None = None
    trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("test_acc", "val_acc", "pseudo_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.conceit is not None and not -2.0 <= self.conceit <= 2.0:
            raise ValueError("conceit must lie in [-2, 2]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsRecord":
        return cls(**json.loads(text))
