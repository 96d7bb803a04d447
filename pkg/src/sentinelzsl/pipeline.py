"""End-to-end experiment orchestration across the two parties.

The data-owner side builds the dataset and teacher and answers protocol
requests; the provider side gets only class semantics, class id lists, and
a channel. run_experiment wires the two together over the chosen
transport, evaluates the trained models on the owner's held-out rows, and
returns one self-contained report. With the tcp transport the owner runs
in a separate spawned process, so the isolation is real, not simulated.
"""
from __future__ import annotations

import json
import logging
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets, evaluation, nncore, protocol, provider, sentinel
from .config import RunConfig, with_overrides
from .sentinel import ConfigError

logger = logging.getLogger(__name__)

# rng streams for model init; the training loops use streams 1-5 of the
# same seed internally.
_GEN_INIT_STREAM, _STUDENT_INIT_STREAM = 10, 11

SWEEP_AXES = {"noise_dim": "noise_dim", "alpha": "reg_weight",
              "sigma_n": "noise_scale"}


@dataclass
class ProviderInputs:
    """Everything the provider may know before the session starts.

    Semantics are public class descriptions; the arrays are copies, so
    nothing here aliases the owner's dataset.
    """

    semantics: np.ndarray
    seen_ids: list
    unseen_ids: list
    feature_dim: int
    num_classes: int

    @classmethod
    def from_dataset(cls, dataset: datasets.ZslDataset) -> "ProviderInputs":
        return cls(
            semantics=np.array(dataset.semantics, copy=True),
            seen_ids=[int(c) for c in dataset.seen_classes],
            unseen_ids=[int(c) for c in dataset.unseen_classes],
            feature_dim=int(dataset.features.shape[1]),
            num_classes=int(dataset.num_classes))


@dataclass
class ProviderArtifacts:
    """Models and logs the provider holds after a session."""

    generator: provider.GeneratorNet
    student: nncore.MlpModel
    classifier: nncore.MlpModel | None
    generator_log: provider.LoopResult
    student_log: provider.LoopResult | None
    classifier_log: provider.LoopResult | None
    distillation: provider.DistillationSet | None
    handshake: dict
    aborted: bool


def provider_session(cfg: RunConfig, inputs: ProviderInputs,
                     channel: protocol.Channel) -> ProviderArtifacts:
    """Run the provider's whole side of one session.

    White-box: guided generator training, then verified distillation.
    Black-box: joint generator+student training, then the same distillation
    pass. A quasi-omniscient sentinel only guides seen classes, so the
    unseen-class classifier is fitted afterwards from generated rows alone.
    """
    loop_cfg = cfg.train_loop_config()
    gen = provider.init_generator(
        cfg.noise_dim, inputs.semantics.shape[1], inputs.feature_dim,
        hidden=tuple(cfg.generator_hidden),
        rng=np.random.default_rng([cfg.seed, _GEN_INIT_STREAM]))
    student = nncore.init_mlp(
        [inputs.feature_dim, *cfg.student_hidden, inputs.num_classes],
        ["leaky_relu"] * len(cfg.student_hidden) + ["identity"],
        np.random.default_rng([cfg.seed, _STUDENT_INIT_STREAM]))

    link = provider.SentinelLink(channel, cfg.protocol, inputs.feature_dim,
                                 inputs.num_classes)
    ack = link.handshake()
    guided_ids = (inputs.seen_ids + inputs.unseen_ids
                  if link.teacher_mode == "omniscient" else inputs.seen_ids)

    if cfg.protocol == "whitebox":
        gen, gen_log = provider.train_generator_whitebox(
            gen, link, inputs.semantics, loop_cfg, class_ids=guided_ids)
    else:
        gen, student, gen_log = provider.train_end_to_end_blackbox(
            gen, student, link, inputs.semantics, loop_cfg,
            class_ids=guided_ids)

    distill = None
    student_log = None
    classifier = classifier_log = None
    aborted = gen_log.aborted
    if not aborted:
        distill = provider.collect_distillation_set(
            gen, link, inputs.semantics, guided_ids, loop_cfg)
        aborted = distill.aborted
    if not aborted:
        student, student_log = provider.train_student(
            student, distill.features, distill.softmax, loop_cfg)
        if link.teacher_mode == "quasi_omniscient":
            classifier, classifier_log = provider.train_unseen_classifier(
                gen, inputs.semantics, inputs.unseen_ids, loop_cfg)
    return ProviderArtifacts(gen, student, classifier, gen_log, student_log,
                             classifier_log, distill, ack, aborted)


def build_dataset(cfg: RunConfig) -> datasets.ZslDataset:
    return datasets.generate_synthetic(cfg.synthetic_spec())


def build_teacher(cfg: RunConfig, dataset: datasets.ZslDataset):
    """Pretrain the owner's teacher per the config; returns (model, log)."""
    dp = cfg.dp_config() if cfg.dp_enabled else None
    return sentinel.pretrain_teacher(
        dataset, cfg.teacher_mode, epochs=cfg.teacher_epochs,
        batch_size=cfg.teacher_batch_size, dp=dp, seed=cfg.seed,
        hidden=tuple(cfg.teacher_hidden), learning_rate=cfg.teacher_lr)


def make_server(cfg: RunConfig, dataset, teacher) -> sentinel.SentinelServer:
    state = sentinel.make_sentinel_state(
        teacher, dataset, cfg.teacher_mode, regularizer=cfg.reg_kind,
        reg_weight=cfg.reg_weight, budget=cfg.budget)
    return sentinel.SentinelServer(state, cfg.protocol)


def _run_over_tcp(cfg: RunConfig, inputs: ProviderInputs, session: str):
    """Spawn a sentinel process, connect, and run the provider side.

    The child rebuilds the dataset and teacher deterministically from the
    same config, announces its port as a JSON line on stdout, serves one
    session, and exits.
    """
    with tempfile.TemporaryDirectory() as workdir:
        cfg_path = Path(workdir) / "config.json"
        cfg_path.write_text(json.dumps(cfg.as_dict()), encoding="utf-8")
        proc = subprocess.Popen(
            [sys.executable, "-m", "sentinelzsl", "serve-sentinel",
             "--config", str(cfg_path)],
            stdout=subprocess.PIPE, text=True)
        channel = None
        try:
            port = None
            for line in proc.stdout:
                try:
                    event = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if event.get("event") == "listening":
                    port = int(event["port"])
                    break
            if port is None:
                raise protocol.ProtocolError(
                    "sentinel process exited before announcing a port")
            channel = protocol.connect(cfg.host, port, session)
            artifacts = provider_session(cfg, inputs, channel)
        finally:
            if channel is not None:
                channel.close()
            if proc.poll() is None:
                try:
                    proc.wait(timeout=30)
                except subprocess.TimeoutExpired:
                    proc.kill()
            proc.stdout.close()
        return artifacts, channel.log


def _sample_accuracy(model: nncore.MlpModel, dataset) -> float:
    """Plain full-space accuracy (%) over the held-out rows."""
    rows = np.isin(dataset.split, ("eval_seen", "eval_unseen"))
    logits = nncore.forward(model, dataset.features[rows])[-1]
    return 100.0 * float((logits.argmax(axis=1) == dataset.labels[rows]).mean())


def run_experiment(cfg: RunConfig, write_artifacts: bool = True) -> dict:
    """One full run: data, teacher, protocol session, evaluation, report.

    Budget-exhausted sessions still return a report (aborted=true, student
    and classifier metrics null). With write_artifacts the report, models,
    and per-phase training log land in cfg.output_dir.
    """
    cfg.validate()
    dataset = build_dataset(cfg)
    teacher, teacher_log = build_teacher(cfg, dataset)
    inputs = ProviderInputs.from_dataset(dataset)
    session = f"session-{cfg.seed}"

    if cfg.transport == "tcp":
        artifacts, session_log = _run_over_tcp(cfg, inputs, session)
    else:
        server = make_server(cfg, dataset, teacher)
        artifacts, session_log = protocol.run_session(
            server, lambda channel: provider_session(cfg, inputs, channel),
            transport="in_process", session=session)

    teacher_report = {
        "train_accuracy": 100.0 * teacher_log[-1]["accuracy"],
        "eval_accuracy": _sample_accuracy(teacher, dataset),
        "eval": evaluation.evaluate_teacher(teacher, dataset, cfg.teacher_mode),
    }
    if cfg.dp_enabled:
        teacher_report["epsilon"] = teacher_log[-1]["epsilon"]

    report = {
        "config": cfg.as_dict(),
        "dataset": {"provenance": sorted(set(dataset.provenance.tolist())),
                    "num_classes": int(dataset.num_classes),
                    "rows": int(len(dataset.labels))},
        "teacher": teacher_report,
        "session": session_log.as_dict(),
        "aborted": artifacts.aborted,
        "student": None,
        "classifier": None,
        "generator": {
            "epochs_run": len(artifacts.generator_log.history),
            "kept_per_class": (dict(artifacts.distillation.kept_per_class)
                               if artifacts.distillation else None),
        },
    }
    if not artifacts.aborted:
        report["student"] = {
            "gzsl": evaluation.evaluate_gzsl(artifacts.student, dataset).as_dict(),
            "czsl": evaluation.evaluate_czsl(artifacts.student, dataset),
            "per_class": evaluation.per_class_accuracy_table(artifacts.student,
                                                             dataset),
        }
        if artifacts.classifier is not None:
            report["classifier"] = {
                "czsl": evaluation.evaluate_czsl(artifacts.classifier, dataset),
            }

    if write_artifacts:
        _write_run_artifacts(cfg, report, teacher, teacher_log, artifacts)
    return report


def _write_run_artifacts(cfg, report, teacher, teacher_log, artifacts) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.as_dict())
    write_json(out / "report.json", report)
    save_model(out / "teacher.json", teacher, "teacher",
               teacher_mode=cfg.teacher_mode)
    save_model(out / "generator.json", artifacts.generator.net, "generator",
               noise_dim=artifacts.generator.noise_dim,
               semantic_dim=artifacts.generator.semantic_dim)
    save_model(out / "student.json", artifacts.student, "student")
    if artifacts.classifier is not None:
        save_model(out / "classifier.json", artifacts.classifier,
                   "unseen_classifier")
    phases = [("teacher", teacher_log),
              ("generator", artifacts.generator_log.history)]
    if artifacts.student_log is not None:
        phases.append(("student", artifacts.student_log.history))
    if artifacts.classifier_log is not None:
        phases.append(("classifier", artifacts.classifier_log.history))
    with open(out / "training_log.jsonl", "w", encoding="utf-8") as fh:
        for phase, history in phases:
            for entry in history:
                fh.write(json.dumps({"phase": phase, **entry}) + "\n")


def write_json(path, document) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_model(path, model: nncore.MlpModel, kind: str, **meta) -> None:
    write_json(path, {"kind": kind, **meta, "model": nncore.model_to_dict(model)})


def load_model(path):
    """Read a saved model file; returns (MlpModel, metadata dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        document = json.load(fh)
    if "model" not in document or "kind" not in document:
        raise ConfigError(f"{path} is not a saved model file")
    meta = {k: v for k, v in document.items() if k != "model"}
    return nncore.model_from_dict(document["model"]), meta


def evaluate_artifact(cfg: RunConfig, model_path) -> dict:
    """Metrics for one saved model against the config's dataset."""
    dataset = build_dataset(cfg)
    model, meta = load_model(model_path)
    kind = meta["kind"]
    if kind == "teacher":
        metrics = evaluation.evaluate_teacher(model, dataset,
                                              meta["teacher_mode"])
    elif kind == "student":
        metrics = {"gzsl": evaluation.evaluate_gzsl(model, dataset).as_dict(),
                   "czsl": evaluation.evaluate_czsl(model, dataset)}
    elif kind == "unseen_classifier":
        metrics = {"czsl": evaluation.evaluate_czsl(model, dataset)}
    else:
        raise ConfigError(f"cannot evaluate a model of kind {kind!r}")
    return {"kind": kind, "metrics": metrics}


def _mean_rows(samples: list[dict]) -> dict:
    keys = samples[0].keys()
    return {k: float(np.mean([s[k] for s in samples])) for k in keys}


def run_sweep(cfg: RunConfig, axis: str, values, seeds) -> list[dict]:
    """Seed-averaged metric rows along one hyper-parameter axis.

    sigma_n probes the private teacher alone (no protocol session);
    noise_dim and alpha run the full pipeline and report student metrics.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(
            f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    rows = []
    for value in values:
        samples = []
        for seed in seeds:
            overrides = {SWEEP_AXES[axis]: value, "seed": int(seed)}
            if axis == "sigma_n":
                overrides["dp_enabled"] = True
            variant = with_overrides(cfg, overrides)
            if axis == "sigma_n":
                dataset = build_dataset(variant)
                teacher, log = build_teacher(variant, dataset)
                samples.append({
                    "epsilon": log[-1]["epsilon"],
                    "teacher_accuracy": _sample_accuracy(teacher, dataset),
                })
            else:
                report = run_experiment(variant, write_artifacts=False)
                gzsl = report["student"]["gzsl"]
                samples.append({
                    "student_unseen": gzsl["unseen"],
                    "student_seen": gzsl["seen"],
                    "student_h": gzsl["harmonic"],
                })
            logger.info("sweep %s=%s seed=%s done", axis, value, seed)
        rows.append({axis: value, **_mean_rows(samples)})
    return rows
