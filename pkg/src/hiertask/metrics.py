"""Hierarchy-aware accuracy metrics.

All rankings break ties towards the lower class index, so ``argmax`` of a
uniform row is class 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Taxonomy
from .errors import ContractError, DimensionError

TOP_K = (1, 3, 5)


def _logits(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected an n x C logit matrix, got shape {arr.shape}")
    return arr


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.size} labels for {n} logit rows")
    return labels


def predict(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.argmax(_logits(logits), axis=1)


def model_accuracy(model_logits, labels) -> float:
    z = _logits(model_logits)
    y = _labels(labels, z.shape[0])
    return float(np.mean(predict(z) == y))


def make_accuracy(make_logits, make_labels) -> float:
    return model_accuracy(make_logits, make_labels)


def derived_make_accuracy(model_logits, make_labels, taxonomy: Taxonomy) -> float:
    """Accuracy of the make read off the predicted model through the taxonomy."""
    z = _logits(model_logits)
    if z.shape[1] != taxonomy.num_models:
        raise DimensionError(f"{z.shape[1]} model logits but taxonomy has {taxonomy.num_models} models")
    y = _labels(make_labels, z.shape[0])
    return float(np.mean(taxonomy.parent_array[predict(z)] == y))


def top_k_accuracy(model_logits, labels, k: int) -> float:
    z = _logits(model_logits)
    n, m = z.shape
    if not 1 <= k <= m:
        raise ContractError(f"k={k} outside [1, {m}]")
    y = _labels(labels, n)
    true = z[np.arange(n), y][:, None]
    cols = np.arange(m)[None, :]
    # rank of the true class: strictly larger logits plus equal logits at lower indices
    rank = np.sum((z > true) | ((z == true) & (cols < y[:, None])), axis=1)
    return float(np.mean(rank < k))


def consistency_rate(model_logits, make_logits, taxonomy: Taxonomy) -> float:
    """Fraction of samples whose predicted make is the parent of the predicted model."""
    if make_logits is None:
        raise ContractError("consistency_rate needs make logits (multi-task output)")
    zm = _logits(model_logits)
    zk = _logits(make_logits)
    if zm.shape[0] != zk.shape[0]:
        raise DimensionError(f"row mismatch: {zm.shape} vs {zk.shape}")
    return float(np.mean(taxonomy.parent_array[predict(zm)] == predict(zk)))


@dataclass
class MetricsReport:
    model_acc: float
    make_acc_derived: float
    top_k_acc: dict[int, float]
    n_samples: int
    make_acc_direct: float | None = None
    consistency_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model_logits, model_labels, make_labels, taxonomy: Taxonomy,
             make_logits=None, ks=TOP_K) -> MetricsReport:
    z = _logits(model_logits)
    m = z.shape[1]
    report = MetricsReport(
        model_acc=model_accuracy(z, model_labels),
        make_acc_derived=derived_make_accuracy(z, make_labels, taxonomy),
        top_k_acc={k: top_k_accuracy(z, model_labels, min(k, m)) for k in ks},
        n_samples=z.shape[0],
    )
    if make_logits is not None:
        report.make_acc_direct = make_accuracy(make_logits, make_labels)
        report.consistency_rate = consistency_rate(z, make_logits, taxonomy)
    return report
