"""Zero-shot datasets: planted synthetic generator, CSV ingestion, split roles.

A dataset is feature rows + integer labels + one semantic vector per class,
with the class ids partitioned into "seen" and "unseen" sets. Each row also
carries a split role (who may use it) and a provenance tag. The synthetic
generator plants a hidden linear semantic-to-feature map so that transfer to
unseen classes is actually possible rather than accidental.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .nncore import as_matrix

SPLIT_TAGS = ("teacher_train_seen", "teacher_train_unseen", "eval_seen", "eval_unseen")
PROVENANCE_TAGS = ("real", "synthetic")
TEACHER_MODES = ("omniscient", "quasi_omniscient")

# Per-class bucket fractions: train / middle / eval. The middle bucket joins
# the eval pool for seen classes and the teacher-train pool for unseen ones.
TRAIN_FRACTION = 0.6
MIDDLE_FRACTION = 0.2

# Minimum pairwise chord distance between unit class semantics; without it
# two classes can land nearly on top of each other and no classifier could
# tell them apart regardless of noise_std.
MIN_SEMANTIC_SEPARATION = 0.3


class DatasetError(ValueError):
    """Malformed dataset input (parse failures, referential breaks)."""


@dataclass
class SyntheticSpec:
    """Recipe for a planted-map synthetic dataset; defaults run in seconds."""

    num_seen: int = 10
    num_unseen: int = 3
    feature_dim: int = 32
    semantic_dim: int = 8
    samples_per_class: int = 200
    noise_std: float = 0.1
    semantic_scale: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_seen", "num_unseen", "feature_dim", "semantic_dim",
                     "samples_per_class"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        if self.noise_std < 0 or self.semantic_scale <= 0:
            raise DatasetError("noise_std must be >= 0 and semantic_scale > 0")


@dataclass
class ZslDataset:
    """Feature rows with class semantics, split roles and provenance tags."""

    features: np.ndarray
    labels: np.ndarray
    semantics: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    split: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.semantics = as_matrix(self.semantics)
        self.seen_classes = np.asarray(sorted(self.seen_classes), dtype=np.int64)
        self.unseen_classes = np.asarray(sorted(self.unseen_classes), dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        self.provenance = np.asarray(self.provenance, dtype=object)

        n = len(self.features)
        if not (len(self.labels) == len(self.split) == len(self.provenance) == n):
            raise DatasetError("features, labels, split and provenance must align")
        if np.intersect1d(self.seen_classes, self.unseen_classes).size:
            raise DatasetError("seen and unseen class sets overlap")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.semantics)):
            bad = int(self.labels.max() if self.labels.max() >= len(self.semantics)
                      else self.labels.min())
            raise DatasetError(
                f"class {bad} has no semantics row (semantics has "
                f"{len(self.semantics)} rows)")
        known = set(self.seen_classes) | set(self.unseen_classes)
        for y in np.unique(self.labels):
            if int(y) not in known:
                raise DatasetError(f"class {int(y)} is neither seen nor unseen")
        seen = set(int(c) for c in self.seen_classes)
        for tag, y in zip(self.split, self.labels):
            if tag not in SPLIT_TAGS:
                raise DatasetError(f"unknown split tag {tag!r}")
            if tag.endswith("_seen") != (int(y) in seen):
                raise DatasetError(
                    f"row of class {int(y)} carries mismatched split tag {tag!r}")
        for tag in self.provenance:
            if tag not in PROVENANCE_TAGS:
                raise DatasetError(f"unknown provenance tag {tag!r}")

    @property
    def num_classes(self) -> int:
        return len(self.semantics)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask: np.ndarray) -> "ZslDataset":
        """Row-filtered copy; class sets and semantics are kept whole."""
        return ZslDataset(
            self.features[mask], self.labels[mask], self.semantics,
            self.seen_classes, self.unseen_classes,
            self.split[mask], self.provenance[mask],
        )

    def rows_with_split(self, *tags: str) -> "ZslDataset":
        for t in tags:
            if t not in SPLIT_TAGS:
                raise DatasetError(f"unknown split tag {t!r}")
        mask = np.isin(self.split, tags)
        return self.subset(mask)


def _assign_splits(class_sizes: dict[int, int], seen: set[int],
                   order: dict[int, np.ndarray]) -> np.ndarray:
    """Bucket each class's rows 60/20/20 into the four split roles."""
    total = sum(class_sizes.values())
    split = np.empty(total, dtype=object)
    for cls, idx in order.items():
        n = len(idx)
        n_train = int(n * TRAIN_FRACTION)
        n_mid = int(n * MIDDLE_FRACTION)
        if cls in seen:
            tags = (["teacher_train_seen"] * n_train
                    + ["eval_seen"] * (n - n_train))
        else:
            tags = (["teacher_train_unseen"] * (n_train + n_mid)
                    + ["eval_unseen"] * (n - n_train - n_mid))
        for row, tag in zip(idx, tags):
            split[row] = tag
    return split


def _sample_separated_semantics(rng: np.random.Generator, count: int,
                                dim: int) -> np.ndarray:
    """Unit vectors on the nonnegative orthant, rejection-sampled so every
    pair is at least MIN_SEMANTIC_SEPARATION apart."""
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < count:
        v = np.abs(rng.normal(size=dim))
        v /= np.linalg.norm(v)
        if all(np.linalg.norm(v - u) >= MIN_SEMANTIC_SEPARATION for u in accepted):
            accepted.append(v)
        attempts += 1
        if attempts > 200 * count:
            raise DatasetError(
                f"cannot place {count} classes {MIN_SEMANTIC_SEPARATION} apart "
                f"in {dim} semantic dimensions")
    return np.stack(accepted)


def generate_synthetic(spec: SyntheticSpec) -> ZslDataset:
    """Sample a dataset whose features are a noisy ReLU-linear image of semantics.

    Semantics are near-uniform on the nonnegative part of the sphere of
    radius ``semantic_scale`` (attribute vectors are nonnegative), with a
    minimum pairwise separation so classes stay distinguishable; the hidden
    map W (feature_dim x semantic_dim) has nonnegative half-normal entries,
    so a least-squares probe from semantics to class means transfers to
    unseen classes. Class c's rows are relu(W @ a_c) + N(0, noise_std^2),
    clamped at zero. Pure function of its arguments: same inputs, same bits.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.num_seen + spec.num_unseen

    semantics = _sample_separated_semantics(rng, k, spec.semantic_dim) * spec.semantic_scale
    hidden_map = np.abs(rng.normal(size=(spec.feature_dim, spec.semantic_dim)))

    features = np.empty((k * spec.samples_per_class, spec.feature_dim))
    labels = np.empty(k * spec.samples_per_class, dtype=np.int64)
    for c in range(k):
        clean = np.maximum(hidden_map @ semantics[c], 0.0)
        noise = rng.normal(scale=spec.noise_std,
                           size=(spec.samples_per_class, spec.feature_dim))
        rows = slice(c * spec.samples_per_class, (c + 1) * spec.samples_per_class)
        features[rows] = np.maximum(clean[None, :] + noise, 0.0)
        labels[rows] = c

    seen = set(range(spec.num_seen))
    order = {c: np.where(labels == c)[0] for c in range(k)}
    split = _assign_splits({c: spec.samples_per_class for c in range(k)}, seen, order)
    return ZslDataset(
        features, labels, semantics,
        np.arange(spec.num_seen), np.arange(spec.num_seen, k),
        split, np.array(["synthetic"] * len(labels), dtype=object),
    )


@dataclass
class SplitPlan:
    """How to partition ingested rows: class roles plus optional shuffling.

    With shuffle_seed=None rows keep file order inside each class, which
    makes export -> load a strict identity.
    """

    seen_classes: list[int]
    unseen_classes: list[int]
    shuffle_seed: int | None = None


def _parse_rows(path, width=None):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            if len(cells) != width:
                raise DatasetError(
                    f"{path}: line {lineno}: expected {width} values, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


def load_csv(features_path, labels_path, semantics_path, plan: SplitPlan) -> ZslDataset:
    """Ingest a features/labels/semantics CSV triple as a "real" dataset.

    One sample per row in the features file; the labels file holds one
    integer per line; the semantics file has one row per class id. Parse
    problems report the offending file and line.
    """
    features = _parse_rows(features_path)
    label_col = _parse_rows(labels_path, width=1)[:, 0]
    if np.any(label_col != np.round(label_col)):
        bad = int(np.argmax(label_col != np.round(label_col))) + 1
        raise DatasetError(f"{labels_path}: line {bad}: label is not an integer")
    labels = label_col.astype(np.int64)
    semantics = _parse_rows(semantics_path)

    if len(labels) != len(features):
        raise DatasetError(
            f"{labels_path}: {len(labels)} labels for {len(features)} feature rows")
    if labels.size and labels.max() >= len(semantics):
        raise DatasetError(
            f"class {int(labels.max())} has no semantics row "
            f"(semantics has {len(semantics)} rows)")

    seen = set(plan.seen_classes)
    order = {}
    for c in np.unique(labels):
        idx = np.where(labels == c)[0]
        if plan.shuffle_seed is not None:
            idx = np.random.default_rng(plan.shuffle_seed + int(c)).permutation(idx)
        order[int(c)] = idx
    split = _assign_splits({c: len(i) for c, i in order.items()}, seen, order)
    return ZslDataset(
        features, labels, semantics,
        np.asarray(plan.seen_classes), np.asarray(plan.unseen_classes),
        split, np.array(["real"] * len(labels), dtype=object),
    )


def export_csv(dataset: ZslDataset, features_path, labels_path, semantics_path) -> None:
    """Write the three-file CSV layout load_csv reads; round trips exactly."""
    np.savetxt(features_path, dataset.features, fmt="%.17g", delimiter=",")
    np.savetxt(labels_path, dataset.labels[:, None], fmt="%d", delimiter=",")
    np.savetxt(semantics_path, dataset.semantics, fmt="%.17g", delimiter=",")


def teacher_view(dataset: ZslDataset, mode: str) -> ZslDataset:
    """Rows the sentinel's teacher may train on.

    "omniscient" sees the train buckets of every class; "quasi_omniscient" sees only
    seen-class train rows and therefore zero unseen-class rows.
    """
    if mode not in TEACHER_MODES:
        raise ValueError(f"unknown teacher mode {mode!r}; expected one of {TEACHER_MODES}")
    if mode == "omniscient":
        return dataset.rows_with_split("teacher_train_seen", "teacher_train_unseen")
    return dataset.rows_with_split("teacher_train_seen")


def class_means(dataset: ZslDataset) -> dict[int, np.ndarray]:
    """Mean feature vector per class over all rows (diagnostics/probes)."""
    return {int(c): dataset.features[dataset.labels == c].mean(axis=0)
            for c in np.unique(dataset.labels)}


def default_spec(**overrides) -> SyntheticSpec:
    """The desk-scale spec used throughout the docs and tests."""
    return dataclasses.replace(SyntheticSpec(), **overrides)
