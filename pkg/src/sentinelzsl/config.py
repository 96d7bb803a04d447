"""Flat run configuration: one JSON document drives every command.

Unknown keys are rejected by name so typos can't silently fall back to
defaults. large_scale=true swaps in the large-model defaults (wide
generator, more noise dimensions, more synthetic rows, small learning
rate); any explicitly-given key still wins.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .datasets import TEACHER_MODES, SyntheticSpec
from .protocol import PROTOCOL_TAGS
from .provider import TrainLoopConfig
from .regularizers import REGULARIZERS
from .sentinel import ConfigError, DpConfig

TRANSPORTS = ("in_process", "tcp")

# Defaults that change when large_scale is on (applied only for keys the
# user left unset).
LARGE_SCALE_DEFAULTS = {
    "noise_dim": 20,
    "generator_hidden": [4096],
    "features_per_class": 400,
    "learning_rate": 1e-5,
}


@dataclass
class RunConfig:
    """Everything a run needs, flattened into one namespace."""

    # synthetic data
    num_seen: int = 10
    num_unseen: int = 3
    feature_dim: int = 32
    semantic_dim: int = 8
    samples_per_class: int = 200
    noise_std: float = 0.1
    semantic_scale: float = 0.35
    data_seed: int = 0

    # teacher
    teacher_mode: str = "omniscient"
    teacher_epochs: int = 40
    teacher_batch_size: int = 64
    teacher_hidden: list = field(default_factory=lambda: [64])
    teacher_lr: float = 5e-3

    # differential privacy (teacher side)
    dp_enabled: bool = False
    noise_scale: float = 0.0
    grad_clip: float = 1.0
    weight_clip: float = 2.0
    delta: float = 1e-5

    # protocol session
    protocol: str = "whitebox"
    reg_kind: str = "kl"
    reg_weight: float = 0.5
    budget: int | None = None
    transport: str = "in_process"
    host: str = "127.0.0.1"
    port: int = 0

    # provider nets and loops
    noise_dim: int = 8
    generator_hidden: list = field(default_factory=lambda: [256])
    student_hidden: list = field(default_factory=lambda: [32])
    gen_epochs: int = 50
    student_epochs: int = 80
    batch_size: int = 64
    features_per_class: int = 80
    learning_rate: float = 5e-3
    verify: bool = True

    # run plumbing
    seed: int = 0
    output_dir: str = "runs/latest"
    large_scale: bool = False

    def validate(self) -> None:
        self.synthetic_spec().validate()
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"unknown teacher_mode {self.teacher_mode!r}")
        if self.protocol not in PROTOCOL_TAGS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.reg_kind not in REGULARIZERS:
            raise ConfigError(f"unknown reg_kind {self.reg_kind!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.teacher_epochs <= 0 or self.teacher_batch_size <= 0:
            raise ConfigError("teacher_epochs and teacher_batch_size must be positive")
        if self.noise_dim <= 0:
            raise ConfigError("noise_dim must be positive")
        if self.budget is not None and self.budget < 0:
            raise ConfigError("budget must be >= 0 or null")
        if not all(isinstance(h, int) and h > 0 for h in self.teacher_hidden):
            raise ConfigError("teacher_hidden must be positive integers")
        if not all(isinstance(h, int) and h > 0 for h in self.generator_hidden):
            raise ConfigError("generator_hidden must be positive integers")
        if not all(isinstance(h, int) and h > 0 for h in self.student_hidden):
            raise ConfigError("student_hidden must be positive integers")
        self.dp_config().validate()
        self.train_loop_config().validate()

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_seen=self.num_seen, num_unseen=self.num_unseen,
            feature_dim=self.feature_dim, semantic_dim=self.semantic_dim,
            samples_per_class=self.samples_per_class, noise_std=self.noise_std,
            semantic_scale=self.semantic_scale, seed=self.data_seed)

    def dp_config(self) -> DpConfig:
        return DpConfig(
            enabled=self.dp_enabled, noise_scale=self.noise_scale,
            grad_clip=self.grad_clip if self.dp_enabled else math.inf,
            weight_clip=self.weight_clip if self.dp_enabled else math.inf,
            delta=self.delta)

    def train_loop_config(self) -> TrainLoopConfig:
        return TrainLoopConfig(
            gen_epochs=self.gen_epochs, student_epochs=self.student_epochs,
            reg_weight=self.reg_weight, batch_size=self.batch_size,
            features_per_class=self.features_per_class, protocol=self.protocol,
            seed=self.seed, learning_rate=self.learning_rate, verify=self.verify)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _known_fields() -> dict:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def from_dict(document: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown keys by name."""
    if not isinstance(document, dict):
        raise ConfigError("config document must be a JSON object")
    fields = _known_fields()
    for key in document:
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
    merged = dict(document)
    if merged.get("large_scale"):
        for key, value in LARGE_SCALE_DEFAULTS.items():
            merged.setdefault(key, value)
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    """Read a config file (flat JSON object)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_dict(document)


def parse_override(text: str) -> tuple[str, object]:
    """Split one ``key=value`` override; values parse as JSON when they can."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with the given keys replaced; rejects unknown keys."""
    document = cfg.as_dict()
    fields = _known_fields()
    for key in overrides:
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
    document.update(overrides)
    return from_dict(document)
