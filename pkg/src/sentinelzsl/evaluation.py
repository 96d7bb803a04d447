"""Zero-shot metrics: per-class accuracy, harmonic mean, split evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import provider
from .datasets import ZslDataset
from .nncore import MlpModel

logger = logging.getLogger(__name__)

EVAL_MODES = ("czsl", "gzsl")


@dataclass
class GzslResult:
    """Generalized evaluation: per-class top-1 percentages and their
    harmonic mean, all in [0, 100]."""

    unseen: float
    seen: float
    harmonic: float

    def as_dict(self) -> dict:
        return {"unseen": self.unseen, "seen": self.seen,
                "harmonic": self.harmonic}


def per_class_top1(predictions, labels, class_set) -> float:
    """Macro-averaged top-1 accuracy in percent.

    Each class contributes its own hit rate with equal weight, so class
    imbalance cannot skew the number. Classes from class_set with no sample
    are excluded from the average with a warning.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"predictions shape {predictions.shape} != labels {labels.shape}")
    ids = sorted({int(c) for c in class_set})
    if not ids:
        raise ValueError("class set is empty")
    unknown = set(labels.tolist()) - set(ids)
    if unknown:
        raise ValueError(f"label {sorted(unknown)[0]} outside the class set")
    rates = []
    for c in ids:
        in_class = labels == c
        if not in_class.any():
            logger.warning("class %d has no samples; excluded from the average", c)
            continue
        rates.append(float((predictions[in_class] == c).mean()))
    if not rates:
        raise ValueError("no class in the set has any samples")
    return 100.0 * float(np.mean(rates))


def harmonic_mean(u: float, s: float) -> float:
    """2us/(u+s), with the empty 0/0 case defined as 0."""
    if u < 0 or s < 0:
        raise ValueError("accuracies must be non-negative")
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def _split_rows(dataset: ZslDataset, tag: str) -> tuple[np.ndarray, np.ndarray]:
    rows = dataset.split == tag
    return dataset.features[rows], dataset.labels[rows]


def evaluate_czsl(model: MlpModel, dataset: ZslDataset) -> float:
    """Top-1 over unseen eval rows with predictions restricted to unseen ids."""
    x, y = _split_rows(dataset, "eval_unseen")
    if len(y) == 0:
        raise ValueError("eval_unseen split is empty")
    space = dataset.unseen_classes.tolist()
    preds = provider.predict(model, x, space)
    return per_class_top1(preds, y, space)


def evaluate_gzsl(model: MlpModel, dataset: ZslDataset) -> GzslResult:
    """Seen and unseen eval accuracy over the full class space, plus H."""
    space = np.concatenate([dataset.seen_classes, dataset.unseen_classes]).tolist()
    x_s, y_s = _split_rows(dataset, "eval_seen")
    x_u, y_u = _split_rows(dataset, "eval_unseen")
    if len(y_s) == 0 or len(y_u) == 0:
        raise ValueError("both eval splits must be nonempty for GZSL")
    s = per_class_top1(provider.predict(model, x_s, space), y_s,
                       dataset.seen_classes.tolist())
    u = per_class_top1(provider.predict(model, x_u, space), y_u,
                       dataset.unseen_classes.tolist())
    return GzslResult(u, s, harmonic_mean(u, s))


def evaluate(model: MlpModel, dataset: ZslDataset, mode: str):
    """mode "czsl" -> float top-1; mode "gzsl" -> GzslResult."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "czsl":
        return evaluate_czsl(model, dataset)
    return evaluate_gzsl(model, dataset)


def evaluate_teacher(teacher: MlpModel, dataset: ZslDataset, mode: str) -> dict:
    """GZSL numbers for the teacher itself.

    Omniscient teachers get the plain full-space result. Quasi-omniscient
    teachers get two: "full_space" lets the untrained unseen logits compete,
    while "restricted_head" confines predictions to the seen classes the
    teacher was actually trained on (forcing unseen accuracy to zero by
    construction).
    """
    report = {"full_space": evaluate_gzsl(teacher, dataset).as_dict()}
    if mode == "quasi_omniscient":
        seen_space = dataset.seen_classes.tolist()
        x_s, y_s = _split_rows(dataset, "eval_seen")
        x_u, y_u = _split_rows(dataset, "eval_unseen")
        s = per_class_top1(provider.predict(teacher, x_s, seen_space), y_s,
                           seen_space)
        u = per_class_top1(provider.predict(teacher, x_u, seen_space), y_u,
                           dataset.unseen_classes.tolist())
        report["restricted_head"] = GzslResult(u, s, harmonic_mean(u, s)).as_dict()
    return report


def per_class_accuracy_table(model: MlpModel, dataset: ZslDataset) -> dict[int, float]:
    """Full-space hit rate per class id over that class's eval rows."""
    space = np.concatenate([dataset.seen_classes, dataset.unseen_classes]).tolist()
    rows = np.isin(dataset.split, ("eval_seen", "eval_unseen"))
    x, y = dataset.features[rows], dataset.labels[rows]
    preds = provider.predict(model, x, space)
    table = {}
    for c in space:
        in_class = y == c
        if in_class.any():
            table[int(c)] = 100.0 * float((preds[in_class] == c).mean())
    return table
