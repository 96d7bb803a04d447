"""Data-owner party: teacher pretraining (optionally private) and guarded feedback.

The sentinel is the only component that touches real feature rows. It
pretrains the teacher network, then answers upload requests from the remote
provider with softmax scores, regularizer feedback, and (white-box only) the
gradient of the classification loss with respect to the uploaded batch.
Raw rows and teacher weights never leave this module. A request budget caps
how many feedback messages it will ever produce.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nncore, protocol
from .datasets import TEACHER_MODES, ZslDataset, teacher_view
from .nncore import DimensionError, GradBundle, MlpModel
from .protocol import BudgetExceededError
from .regularizers import get_regularizer


class ConfigError(ValueError):
    """Invalid privacy or training configuration."""


@dataclass
class DpConfig:
    """Private-training knobs: per-sample clipping, noise, weight truncation.

    noise_scale is the noise multiplier relative to grad_clip; weight_clip
    truncates parameters after every optimizer step; delta is the privacy
    failure probability used by the epsilon report. sample_rate and steps
    describe the training schedule for accounting purposes.
    """

    enabled: bool = False
    noise_scale: float = 0.0
    grad_clip: float = math.inf
    weight_clip: float = math.inf
    delta: float = 1e-5
    sample_rate: float = 1.0
    steps: int = 0

    def validate(self) -> None:
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.grad_clip <= 0 or self.weight_clip <= 0:
            raise ConfigError("grad_clip and weight_clip must be positive")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0, 1)")
        if not (0.0 < self.sample_rate <= 1.0):
            raise ConfigError("sample_rate must lie in (0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.enabled and self.noise_scale > 0 and not math.isfinite(self.grad_clip):
            raise ConfigError("noise with unbounded grad_clip gives no guarantee")


def per_sample_gradients(model: MlpModel, batch: np.ndarray, labels) -> list[GradBundle]:
    """One cross-entropy GradBundle per row, via independent per-row backprop."""
    batch = nncore.as_matrix(batch)
    labels = np.asarray(labels, dtype=np.int64)
    grads = []
    for i in range(len(batch)):
        acts = nncore.forward(model, batch[i:i + 1])
        _, dlogits = nncore.softmax_cross_entropy(acts[-1], labels[i:i + 1])
        bundle, _ = nncore.backward(model, acts, dlogits)
        grads.append(bundle)
    return grads


def _clipped_noisy_mean(grads: list[GradBundle], clip: float, noise_scale: float,
                        rng: np.random.Generator | None) -> GradBundle:
    """Mean of per-sample gradients with optional norm clipping and noise.

    This single code path serves both private and plain training; with
    clip=inf and noise_scale=0 no per-array arithmetic differs from a plain
    mean, which is what makes the degenerate-privacy runs bit-identical.
    """
    if not grads:
        raise ValueError("empty gradient batch")
    batch = len(grads)
    total: GradBundle | None = None
    for g in grads:
        if math.isfinite(clip):
            norm = g.global_norm()
            if norm > clip:
                g = g.scale(clip / norm)
        if total is None:
            total = g.copy()
        else:
            for acc, arr in zip(total.arrays(), g.arrays()):
                acc += arr
    mean = total.scale(1.0 / batch)
    if noise_scale > 0.0:
        if rng is None:
            raise ValueError("noise requested but no rng supplied")
        std = noise_scale * clip / batch
        for arr in mean.arrays():
            arr += rng.normal(0.0, std, size=arr.shape)
    return mean


def dp_sgd_step(model: MlpModel, per_sample_grads: list[GradBundle], dp: DpConfig,
                rng: np.random.Generator) -> GradBundle:
    """Privately aggregate per-sample gradients: clip each to norm grad_clip,
    average, then add Gaussian noise with std noise_scale*grad_clip/batch."""
    if not dp.enabled:
        raise ConfigError("dp_sgd_step requires an enabled DpConfig")
    dp.validate()
    if not per_sample_grads:
        raise ValueError("empty gradient batch")
    for g in per_sample_grads:
        for arr, param in zip(g.arrays(), model.weights + model.biases):
            if arr.shape != param.shape:
                raise DimensionError(
                    f"gradient shape {arr.shape} != parameter shape {param.shape}")
    return _clipped_noisy_mean(per_sample_grads, dp.grad_clip, dp.noise_scale, rng)


def privacy_report(dp: DpConfig) -> float:
    """Epsilon estimate for the configured schedule at the configured delta.

    Per-step epsilon comes from the closed-form Gaussian-mechanism bound
    sqrt(2*ln(1.25/delta'))/noise_scale with the failure probability split
    evenly across steps (delta' = delta/steps); step epsilons add up. This
    is a simple upper-bound-style estimate -- it ignores subsampling
    amplification, so the true guarantee is at least as strong.
    """
    if not dp.enabled:
        raise ConfigError("privacy_report requires an enabled DpConfig")
    dp.validate()
    if dp.steps == 0:
        return 0.0
    if dp.noise_scale == 0.0:
        return math.inf
    per_step_delta = dp.delta / dp.steps
    per_step_eps = math.sqrt(2.0 * math.log(1.25 / per_step_delta)) / dp.noise_scale
    return dp.steps * per_step_eps


def _clip_weights(model: MlpModel, bound: float) -> None:
    for arr in model.weights + model.biases:
        np.clip(arr, -bound, bound, out=arr)


def _accuracy(model: MlpModel, features, labels) -> float:
    logits = nncore.forward(model, features)[-1]
    return float((logits.argmax(axis=1) == labels).mean())


def pretrain_teacher(dataset: ZslDataset, mode: str, epochs: int, batch_size: int,
                     dp: DpConfig | None = None, seed: int = 0,
                     hidden: tuple[int, ...] = (64,), learning_rate: float = 5e-3,
                     ) -> tuple[MlpModel, list[dict]]:
    """Supervised teacher training on the rows the given mode may see.

    The head always spans every class id in the dataset; a quasi_omniscient
    teacher simply never receives unseen-class rows, so those logits stay
    untrained. With dp.enabled each step clips per-sample gradients, noises
    the mean, applies Adam, then truncates all parameters to
    (-weight_clip, weight_clip). Returns the model plus one log record per
    epoch (loss, accuracy, epsilon-so-far when private).
    """
    if mode not in TEACHER_MODES:
        raise ConfigError(f"unknown teacher mode {mode!r}")
    if epochs <= 0 or batch_size <= 0:
        raise ConfigError("epochs and batch_size must be positive")
    dp = dp or DpConfig()
    dp.validate()

    view = teacher_view(dataset, mode)
    if mode == "quasi_omniscient":
        assert not np.isin(view.labels, dataset.unseen_classes).any(), \
            "quasi_omniscient teacher view leaked unseen-class rows"
    required = (dataset.seen_classes if mode == "quasi_omniscient"
                else np.concatenate([dataset.seen_classes, dataset.unseen_classes]))
    present = set(np.unique(view.labels).tolist())
    for c in required:
        if int(c) not in present:
            raise ConfigError(f"class {int(c)} has no training rows in this view")

    init_rng, shuffle_rng, noise_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    dims = [view.features.shape[1], *hidden, dataset.num_classes]
    activations = ["leaky_relu"] * len(hidden) + ["identity"]
    model = nncore.init_mlp(dims, activations, init_rng)
    adam = nncore.init_adam(model, lr=learning_rate)

    n = len(view.labels)
    batches_per_epoch = max(1, math.ceil(n / batch_size))
    log: list[dict] = []
    steps_done = 0
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for b in range(batches_per_epoch):
            rows = order[b * batch_size:(b + 1) * batch_size]
            if rows.size == 0:
                continue
            grads = per_sample_gradients(model, view.features[rows], view.labels[rows])
            if dp.enabled:
                agg = _clipped_noisy_mean(grads, dp.grad_clip, dp.noise_scale, noise_rng)
            else:
                agg = _clipped_noisy_mean(grads, math.inf, 0.0, None)
            nncore.adam_step(model, agg, adam)
            if dp.enabled:
                _clip_weights(model, dp.weight_clip)
            steps_done += 1
        logits = nncore.forward(model, view.features)[-1]
        loss, _ = nncore.softmax_cross_entropy(logits, view.labels)
        record = {
            "epoch": epoch,
            "loss": loss,
            "accuracy": _accuracy(model, view.features, view.labels),
        }
        if dp.enabled:
            report_cfg = DpConfig(True, dp.noise_scale, dp.grad_clip, dp.weight_clip,
                                  dp.delta, min(1.0, batch_size / n), steps_done)
            record["epsilon"] = privacy_report(report_cfg)
        log.append(record)
    return model, log


@dataclass
class WhiteboxAnswer:
    """Feedback for one white-box upload: scores, penalty, and gradients.

    loss_grad is d[CE + reg_weight*R]/d(batch) -- the only mid-risk field.
    reg_grad is the low-risk d[reg_weight*R]/d(batch) shared by both
    protocols; reg_value is the unweighted penalty measurement.
    """

    softmax: np.ndarray
    loss_grad: np.ndarray
    reg_value: float
    reg_grad: np.ndarray


@dataclass
class BlackboxAnswer:
    """Feedback for one black-box upload: scores and regularizer feedback only."""

    softmax: np.ndarray
    reg_value: float
    reg_grad: np.ndarray


@dataclass
class SentinelState:
    """Everything the data owner holds during a session.

    real_batches maps class id -> private real rows used as the regularizer
    reference; budget is the number of feedback answers remaining (None =
    unlimited); answered counts every reply actually produced.
    """

    teacher: MlpModel
    mode: str
    regularizer: str
    reg_weight: float
    real_batches: dict[int, np.ndarray]
    budget: int | None = None
    answered: int = 0
    _pooled: np.ndarray | None = field(default=None, repr=False)

    def pooled_real(self) -> np.ndarray:
        if self._pooled is None:
            self._pooled = np.vstack(list(self.real_batches.values()))
        return self._pooled


def make_sentinel_state(teacher: MlpModel, dataset: ZslDataset, mode: str,
                        regularizer: str = "kl", reg_weight: float = 0.5,
                        budget: int | None = None) -> SentinelState:
    """Bundle the teacher with per-class real reference rows for a session."""
    if mode not in TEACHER_MODES:
        raise ConfigError(f"unknown teacher mode {mode!r}")
    get_regularizer(regularizer)  # validate kind early
    if budget is not None and budget < 0:
        raise ConfigError("budget must be >= 0 or None")
    view = teacher_view(dataset, mode)
    batches = {int(c): view.features[view.labels == c]
               for c in np.unique(view.labels)}
    return SentinelState(teacher, mode, regularizer, float(reg_weight), batches,
                         budget)


def _take_budget(state: SentinelState) -> None:
    if state.budget is not None:
        if state.budget <= 0:
            raise BudgetExceededError(
                f"request budget exhausted after {state.answered} answers")
        state.budget -= 1
    state.answered += 1


def _checked_batch(state: SentinelState, batch) -> np.ndarray:
    batch = nncore.as_matrix(batch)
    if batch.shape[1] != state.teacher.input_dim:
        raise DimensionError(
            f"batch width {batch.shape[1]} != teacher input {state.teacher.input_dim}")
    return batch


def _reg_feedback(state: SentinelState, batch: np.ndarray,
                  labels) -> tuple[float, np.ndarray]:
    """Penalty value plus reg_weight-scaled gradient against private rows.

    Class-pure batches are compared with the matching class's real rows;
    mixed or unknown-class batches fall back to the pooled reference.
    """
    fn = get_regularizer(state.regularizer)
    reference = state.pooled_real()
    if labels is not None:
        uniq = np.unique(np.asarray(labels, dtype=np.int64))
        if len(uniq) == 1 and int(uniq[0]) in state.real_batches:
            reference = state.real_batches[int(uniq[0])]
    value, grad = fn(batch, reference)
    return value, state.reg_weight * grad


def answer_whitebox(batch, conditioned_labels, state: SentinelState) -> WhiteboxAnswer:
    """Score an uploaded batch and return the classification-loss gradient.

    The gradient is with respect to the uploaded rows only (never weights):
    d[CE(teacher(batch), labels) + reg_weight*R(batch)]/d(batch). Decrements
    the budget by exactly one.
    """
    batch = _checked_batch(state, batch)
    labels = np.asarray(conditioned_labels, dtype=np.int64)
    if labels.shape != (len(batch),):
        raise DimensionError(f"expected {len(batch)} labels, got {labels.shape}")
    _take_budget(state)
    acts = nncore.forward(state.teacher, batch)
    probs = nncore.softmax(acts[-1])
    _, dlogits = nncore.softmax_cross_entropy(acts[-1], labels)
    _, class_grad = nncore.backward(state.teacher, acts, dlogits)
    reg_value, reg_grad = _reg_feedback(state, batch, labels)
    return WhiteboxAnswer(probs, class_grad + reg_grad, reg_value, reg_grad)


class SentinelServer:
    """Wire-facing request handler: speaks the message schema, owns the state.

    Intended as the ``handler`` argument of protocol.serve/run_session. Every
    reply is built through the schema constructors, so risk tags are always
    the canonical ones and nothing outside the schema can leak.
    """

    def __init__(self, state: SentinelState, protocol_tag: str):
        if protocol_tag not in protocol.PROTOCOL_TAGS:
            raise ConfigError(f"unknown protocol tag {protocol_tag!r}")
        self.state = state
        self.protocol_tag = protocol_tag
        self.greeted = False

    def _hello_ack(self, msg: protocol.WireMessage) -> tuple[str, dict]:
        p = msg.payload
        if p["protocol"] != self.protocol_tag:
            return _error_reply("protocol_mismatch",
                                f"sentinel serves {self.protocol_tag!r}, "
                                f"client asked for {p['protocol']!r}")
        if p["feature_dim"] != self.state.teacher.input_dim:
            return _error_reply("dim_mismatch",
                                f"teacher expects {self.state.teacher.input_dim} features")
        if p["num_classes"] != self.state.teacher.output_dim:
            return _error_reply("dim_mismatch",
                                f"teacher has {self.state.teacher.output_dim} classes")
        self.greeted = True
        ack = protocol.make_hello_ack(
            msg.session, self.protocol_tag, self.state.teacher.input_dim,
            self.state.teacher.output_dim, self.state.regularizer,
            self.state.reg_weight, self.state.budget, self.state.mode)
        return ack.type, ack.payload

    def __call__(self, msg: protocol.WireMessage) -> tuple[str, dict]:
        try:
            if msg.type == "Hello":
                return self._hello_ack(msg)
            if msg.type == "UploadBatch":
                if not self.greeted:
                    return _error_reply("protocol_violation",
                                        "UploadBatch before handshake")
                features = np.asarray(msg.payload["features"], dtype=np.float64)
                labels = np.asarray(msg.payload["labels"], dtype=np.int64)
                if self.protocol_tag == "whitebox":
                    a = answer_whitebox(features, labels, self.state)
                    reply = protocol.make_whitebox_feedback(
                        msg.session, a.softmax.tolist(), a.reg_value,
                        a.reg_grad.tolist(), a.loss_grad.tolist())
                else:
                    a = answer_blackbox(features, self.state, labels)
                    reply = protocol.make_blackbox_feedback(
                        msg.session, a.softmax.tolist(), a.reg_value,
                        a.reg_grad.tolist())
                return reply.type, reply.payload
            return _error_reply("protocol_violation",
                                f"unexpected message type {msg.type!r}")
        except BudgetExceededError as exc:
            return _error_reply("budget_exhausted", exc.detail)
        except (DimensionError, ValueError) as exc:
            return _error_reply("bad_request", str(exc))


def _error_reply(code: str, detail: str) -> tuple[str, dict]:
    err = protocol.make_error("", code, detail)
    return err.type, err.payload


def answer_blackbox(batch, state: SentinelState, conditioned_labels=None) -> BlackboxAnswer:
    """Score an uploaded batch without revealing any classification gradient.

    Only softmax rows and the regularizer value/gradient (moment
    information) are returned. Labels, when supplied by the wire layer,
    merely select the class-matched regularizer reference.
    """
    batch = _checked_batch(state, batch)
    _take_budget(state)
    probs = nncore.softmax(nncore.forward(state.teacher, batch)[-1])
    reg_value, reg_grad = _reg_feedback(state, batch, conditioned_labels)
    return BlackboxAnswer(probs, reg_value, reg_grad)
