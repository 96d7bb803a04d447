"""Model-builder party: conditional feature generator and student training.

This side never holds a real feature row. Its inputs are class semantic
vectors, integer class ids, configuration, and whatever the data owner's
sentinel sends back over the wire: softmax scores, a distribution penalty
with its gradient, and (white-box sessions only) the gradient of the
classification loss with respect to the uploaded batch. Keeping this module
free of any import of the data-owner code is part of the privacy contract
and is checked by the test suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore, protocol
from .nncore import DimensionError, MlpModel
from .protocol import BudgetExceededError

logger = logging.getLogger(__name__)

# Fixed per-purpose seed-stream offsets so loops sharing one config seed
# still draw independent noise.
_WB_STREAM, _BB_STREAM, _STUDENT_STREAM, _COLLECT_STREAM, _UNSEEN_STREAM = range(1, 6)


@dataclass
class GeneratorNet:
    """Conditional generator: (noise, class semantic vector) -> feature row.

    The wrapped network takes the concatenation of a noise draw and a
    semantic vector; its output activation is ReLU so generated features
    live in the same non-negative space as the real ones.
    """

    net: MlpModel
    noise_dim: int
    semantic_dim: int

    def __post_init__(self):
        if self.noise_dim <= 0 or self.semantic_dim <= 0:
            raise DimensionError("noise_dim and semantic_dim must be positive")
        if self.net.input_dim != self.noise_dim + self.semantic_dim:
            raise DimensionError(
                f"generator input {self.net.input_dim} != "
                f"noise_dim + semantic_dim = {self.noise_dim + self.semantic_dim}")
        if self.net.activations[-1] != "relu":
            raise DimensionError("generator output activation must be 'relu'")

    @property
    def feature_dim(self) -> int:
        return self.net.output_dim


def init_generator(noise_dim: int, semantic_dim: int, feature_dim: int,
                   hidden: tuple[int, ...] = (256,),
                   rng: np.random.Generator | None = None) -> GeneratorNet:
    """Fresh generator with leaky-ReLU hidden layers and a ReLU output."""
    dims = [noise_dim + semantic_dim, *hidden, feature_dim]
    activations = ["leaky_relu"] * len(hidden) + ["relu"]
    return GeneratorNet(nncore.init_mlp(dims, activations, rng),
                        noise_dim, semantic_dim)


@dataclass
class TrainLoopConfig:
    """Knobs for the provider-side training loops.

    reg_weight is echoed to the sentinel when a session is set up; the
    weighted penalty gradient always arrives ready-scaled from the wire.
    verify toggles dropping generated rows whose teacher argmax disagrees
    with the conditioning label (the ablation switch).
    """

    gen_epochs: int = 50
    student_epochs: int = 80
    reg_weight: float = 0.5
    batch_size: int = 64
    features_per_class: int = 80
    protocol: str = "whitebox"
    seed: int = 0
    learning_rate: float = 5e-3
    verify: bool = True

    def validate(self) -> None:
        if self.gen_epochs <= 0 or self.student_epochs <= 0:
            raise ValueError("gen_epochs and student_epochs must be positive")
        if self.features_per_class <= 0:
            raise ValueError("features_per_class must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.protocol not in protocol.PROTOCOL_TAGS:
            raise ValueError(f"unknown protocol tag {self.protocol!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class Feedback:
    """One decoded sentinel reply. loss_grad is None in black-box sessions."""

    softmax: np.ndarray
    reg_value: float
    reg_grad: np.ndarray
    loss_grad: np.ndarray | None = None


class SentinelLink:
    """Client-side session handle: handshake once, then upload-and-wait.

    Validates every reply shape against the uploaded batch so a broken or
    hostile sentinel fails loudly instead of corrupting training.
    """

    def __init__(self, channel: protocol.Channel, protocol_tag: str,
                 feature_dim: int, num_classes: int):
        if protocol_tag not in protocol.PROTOCOL_TAGS:
            raise ValueError(f"unknown protocol tag {protocol_tag!r}")
        self.channel = channel
        self.protocol = protocol_tag
        self.feature_dim = int(feature_dim)
        self.num_classes = int(num_classes)
        self.reg_kind: str | None = None
        self.reg_weight: float = 0.0
        self.budget: int | None = None
        self.teacher_mode: str | None = None
        self.greeted = False

    def handshake(self) -> dict:
        hello = protocol.make_hello(self.channel.session or "", self.protocol,
                                    self.feature_dim, self.num_classes)
        reply = self.channel.request("Hello", hello.payload)
        if reply.type != "HelloAck":
            raise protocol.SchemaError(f"expected HelloAck, got {reply.type!r}")
        p = reply.payload
        if p["protocol"] != self.protocol:
            raise protocol.SchemaError(
                f"sentinel acknowledged protocol {p['protocol']!r}, "
                f"asked for {self.protocol!r}")
        self.reg_kind = p["reg_kind"]
        self.reg_weight = float(p["reg_weight"])
        self.budget = p["budget"]
        self.teacher_mode = p["teacher_mode"]
        self.greeted = True
        return p

    def ensure_handshake(self) -> None:
        if not self.greeted:
            self.handshake()

    def upload(self, features, labels) -> Feedback:
        """Send one generated batch; block for the feedback."""
        self.ensure_handshake()
        features = nncore.as_matrix(features)
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[1] != self.feature_dim:
            raise DimensionError(
                f"batch width {features.shape[1]} != session width {self.feature_dim}")
        if labels.shape != (len(features),):
            raise DimensionError(
                f"expected {len(features)} labels, got shape {labels.shape}")
        msg = protocol.make_upload(self.channel.session or "", features, labels)
        reply = self.channel.request("UploadBatch", msg.payload)
        expected = ("WhiteboxFeedback" if self.protocol == "whitebox"
                    else "BlackboxFeedback")
        if reply.type != expected:
            raise protocol.SchemaError(
                f"expected {expected}, got {reply.type!r}")
        p = reply.payload
        fb = Feedback(
            softmax=np.asarray(p["softmax"], dtype=np.float64),
            reg_value=float(p["reg_value"]),
            reg_grad=np.asarray(p["reg_grad"], dtype=np.float64),
            loss_grad=(np.asarray(p["loss_grad"], dtype=np.float64)
                       if "loss_grad" in p else None))
        if fb.softmax.shape != (len(features), self.num_classes):
            raise protocol.SchemaError(
                f"softmax shape {fb.softmax.shape} does not match batch")
        if fb.reg_grad.shape != features.shape:
            raise protocol.SchemaError(
                f"reg_grad shape {fb.reg_grad.shape} does not match batch")
        if fb.loss_grad is not None and fb.loss_grad.shape != features.shape:
            raise protocol.SchemaError(
                f"loss_grad shape {fb.loss_grad.shape} does not match batch")
        return fb


def synthesize(gen: GeneratorNet, semantics, labels, n_per_class: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Generate n_per_class feature rows for each requested class id.

    Noise is drawn standard-normal per sample; the class's semantic vector
    is tiled alongside it. Rows come out grouped by class in the order the
    ids were given.
    """
    semantics = nncore.as_matrix(semantics)
    if semantics.shape[1] != gen.semantic_dim:
        raise DimensionError(
            f"semantics width {semantics.shape[1]} != generator "
            f"semantic_dim {gen.semantic_dim}")
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    ids = [int(c) for c in labels]
    for c in ids:
        if not 0 <= c < len(semantics):
            raise ValueError(f"unknown class id {c}")
    blocks = []
    for c in ids:
        z = rng.standard_normal((n_per_class, gen.noise_dim))
        a = np.repeat(semantics[c:c + 1], n_per_class, axis=0)
        blocks.append(nncore.forward(gen.net, np.hstack([z, a]))[-1])
    if not blocks or n_per_class == 0:
        return (np.zeros((0, gen.feature_dim)), np.zeros(0, dtype=np.int64))
    features = np.vstack(blocks)
    out_labels = np.repeat(np.asarray(ids, dtype=np.int64), n_per_class)
    return features, out_labels


@dataclass
class LoopResult:
    """Per-epoch records from one training loop.

    aborted flips to True when the sentinel's budget ran out mid-loop; the
    records collected up to that point are kept.
    """

    history: list[dict] = field(default_factory=list)
    aborted: bool = False

    def series(self, key: str) -> list[float]:
        return [rec[key] for rec in self.history if key in rec]


def _ce_from_softmax(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy given already-normalized score rows."""
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def _softmax_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    inner = (upstream * probs).sum(axis=1, keepdims=True)
    return probs * (upstream - inner)


def _class_ids_or_default(semantics, class_ids) -> list[int]:
    if class_ids is None:
        return list(range(len(nncore.as_matrix(semantics))))
    return [int(c) for c in class_ids]


def train_generator_whitebox(gen: GeneratorNet, link: SentinelLink, semantics,
                             cfg: TrainLoopConfig, class_ids=None,
                             rng: np.random.Generator | None = None,
                             ) -> tuple[GeneratorNet, LoopResult]:
    """Teach the generator from full loss gradients on its uploads.

    Each epoch uploads one class-pure batch per class; the sentinel's reply
    carries d[classification loss + weighted penalty]/d(batch), which is
    chained through the generator and applied with Adam. The logged loss is
    what the sentinel measured before that step's update.
    """
    cfg.validate()
    if cfg.protocol != "whitebox":
        raise ValueError("train_generator_whitebox requires protocol 'whitebox'")
    link.ensure_handshake()
    semantics = nncore.as_matrix(semantics)
    ids = _class_ids_or_default(semantics, class_ids)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _WB_STREAM])
    adam = nncore.init_adam(gen.net, lr=cfg.learning_rate)
    result = LoopResult()
    for epoch in range(1, cfg.gen_epochs + 1):
        ce_total = reg_total = 0.0
        classes_done = 0
        try:
            for c in ids:
                z = rng.standard_normal((cfg.batch_size, gen.noise_dim))
                a = np.repeat(semantics[c:c + 1], cfg.batch_size, axis=0)
                acts = nncore.forward(gen.net, np.hstack([z, a]))
                labels = np.full(cfg.batch_size, c, dtype=np.int64)
                fb = link.upload(acts[-1], labels)
                grads, _ = nncore.backward(gen.net, acts, fb.loss_grad)
                nncore.adam_step(gen.net, grads, adam)
                ce_total += _ce_from_softmax(fb.softmax, labels)
                reg_total += fb.reg_value
                classes_done += 1
        except BudgetExceededError as exc:
            result.aborted = True
            logger.warning("generator training stopped early: %s", exc.detail)
        if classes_done:
            ce = ce_total / classes_done
            reg = reg_total / classes_done
            result.history.append({"epoch": epoch, "ce": ce, "reg": reg,
                                   "loss": ce + link.reg_weight * reg})
        if result.aborted:
            result.history.append({"event": "budget_exhausted", "epoch": epoch})
            break
    return gen, result


def train_end_to_end_blackbox(gen: GeneratorNet, student: MlpModel,
                              link: SentinelLink, semantics,
                              cfg: TrainLoopConfig, class_ids=None,
                              rng: np.random.Generator | None = None,
                              ) -> tuple[GeneratorNet, MlpModel, LoopResult]:
    """Joint generator/student training from score feedback alone.

    The sentinel's softmax rows act as fixed targets: the squared distance
    between them and the student's own softmax trains the student directly
    and reaches the generator through the student's input gradient. The
    weighted penalty gradient from the feedback steers the generator toward
    realistic feature statistics. Rows failing verification are left out of
    the distance term; a class losing every row is noted and skipped for
    the epoch.
    """
    cfg.validate()
    if cfg.protocol != "blackbox":
        raise ValueError("train_end_to_end_blackbox requires protocol 'blackbox'")
    link.ensure_handshake()
    semantics = nncore.as_matrix(semantics)
    if student.input_dim != gen.feature_dim:
        raise DimensionError(
            f"student input {student.input_dim} != generator output "
            f"{gen.feature_dim}")
    ids = _class_ids_or_default(semantics, class_ids)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _BB_STREAM])
    gen_adam = nncore.init_adam(gen.net, lr=cfg.learning_rate)
    student_adam = nncore.init_adam(student, lr=cfg.learning_rate)
    result = LoopResult()
    for epoch in range(1, cfg.gen_epochs + 1):
        l2_total = reg_total = 0.0
        l2_batches = 0
        kept_rows = total_rows = 0
        classes_done = 0
        try:
            for c in ids:
                z = rng.standard_normal((cfg.batch_size, gen.noise_dim))
                a = np.repeat(semantics[c:c + 1], cfg.batch_size, axis=0)
                gen_acts = nncore.forward(gen.net, np.hstack([z, a]))
                batch = gen_acts[-1]
                labels = np.full(cfg.batch_size, c, dtype=np.int64)
                fb = link.upload(batch, labels)
                upstream = fb.reg_grad.copy()
                if cfg.verify:
                    keep = np.flatnonzero(fb.softmax.argmax(axis=1) == labels)
                else:
                    keep = np.arange(len(labels))
                total_rows += len(labels)
                kept_rows += keep.size
                if keep.size:
                    s_acts = nncore.forward(student, batch[keep])
                    s_probs = nncore.softmax(s_acts[-1])
                    diff = s_probs - fb.softmax[keep]
                    l2_total += float((diff ** 2).sum(axis=1).mean())
                    l2_batches += 1
                    dlogits = _softmax_vjp(s_probs, 2.0 * diff / keep.size)
                    s_grads, s_input_grad = nncore.backward(student, s_acts, dlogits)
                    nncore.adam_step(student, s_grads, student_adam)
                    upstream[keep] += s_input_grad
                else:
                    # Routine early in training, before the generator finds the class.
                    logger.debug(
                        "epoch %d: class %d produced no verified rows", epoch, c)
                g_grads, _ = nncore.backward(gen.net, gen_acts, upstream)
                nncore.adam_step(gen.net, g_grads, gen_adam)
                reg_total += fb.reg_value
                classes_done += 1
        except BudgetExceededError as exc:
            result.aborted = True
            logger.warning("end-to-end training stopped early: %s", exc.detail)
        if classes_done:
            result.history.append({
                "epoch": epoch,
                "l2": l2_total / max(l2_batches, 1),
                "reg": reg_total / classes_done,
                "kept_fraction": kept_rows / max(total_rows, 1),
            })
        if result.aborted:
            result.history.append({"event": "budget_exhausted", "epoch": epoch})
            break
    return gen, student, result


@dataclass
class VerifiedBatch:
    """Generated rows whose teacher argmax agrees with their label.

    Construction checks the agreement row by row, so holding a
    VerifiedBatch is itself the guarantee.
    """

    features: np.ndarray
    labels: np.ndarray
    softmax: np.ndarray

    def __post_init__(self):
        self.features = nncore.as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.softmax = nncore.as_matrix(self.softmax)
        if not (len(self.features) == len(self.labels) == len(self.softmax)):
            raise DimensionError("features, labels, and softmax row counts differ")
        if len(self.labels) and (self.softmax.argmax(axis=1) != self.labels).any():
            raise ValueError("row whose score argmax disagrees with its label")

    def __len__(self) -> int:
        return len(self.labels)


def verify_labels(features, conditioned_labels, teacher_softmax) -> VerifiedBatch:
    """Keep exactly the rows the teacher assigns to their conditioning class.

    Order is preserved; an empty result is legal and left to the caller to
    handle.
    """
    features = nncore.as_matrix(features)
    labels = np.asarray(conditioned_labels, dtype=np.int64)
    softmax = nncore.as_matrix(teacher_softmax)
    if not (len(features) == len(labels) == len(softmax)):
        raise DimensionError("features, labels, and softmax row counts differ")
    if len(labels) == 0:
        return VerifiedBatch(features, labels, softmax)
    keep = softmax.argmax(axis=1) == labels
    return VerifiedBatch(features[keep], labels[keep], softmax[keep])


@dataclass
class DistillationSet:
    """Labelled synthetic rows plus their teacher scores, ready to distill.

    kept_per_class records how many rows survived verification for each
    requested class; aborted marks a budget failure part-way through
    collection.
    """

    features: np.ndarray
    labels: np.ndarray
    softmax: np.ndarray
    kept_per_class: dict[int, int]
    aborted: bool = False


def collect_distillation_set(gen: GeneratorNet, link: SentinelLink, semantics,
                             class_ids, cfg: TrainLoopConfig,
                             rng: np.random.Generator | None = None,
                             ) -> DistillationSet:
    """Synthesize features_per_class rows per class and fetch their scores.

    One upload per class. With cfg.verify the disagreeing rows are dropped;
    classes that lose every row are noted with a warning and a zero count.
    """
    cfg.validate()
    link.ensure_handshake()
    semantics = nncore.as_matrix(semantics)
    ids = _class_ids_or_default(semantics, class_ids)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _COLLECT_STREAM])
    feats, labs, soft = [], [], []
    kept: dict[int, int] = {}
    aborted = False
    for c in ids:
        batch, labels = synthesize(gen, semantics, [c], cfg.features_per_class, rng)
        try:
            fb = link.upload(batch, labels)
        except BudgetExceededError as exc:
            logger.warning("collection stopped early: %s", exc.detail)
            aborted = True
            break
        if cfg.verify:
            vb = verify_labels(batch, labels, fb.softmax)
            batch, labels, scores = vb.features, vb.labels, vb.softmax
        else:
            scores = fb.softmax
        kept[c] = len(labels)
        if len(labels) == 0:
            logger.warning("class %d produced no verified rows", c)
            continue
        feats.append(batch)
        labs.append(labels)
        soft.append(scores)
    if feats:
        features = np.vstack(feats)
        labels_out = np.concatenate(labs)
        softmax_out = np.vstack(soft)
    else:
        features = np.zeros((0, gen.feature_dim))
        labels_out = np.zeros(0, dtype=np.int64)
        softmax_out = np.zeros((0, link.num_classes))
    return DistillationSet(features, labels_out, softmax_out, kept, aborted)


def train_student(student: MlpModel, verified, teacher_softmax,
                  cfg: TrainLoopConfig, rng: np.random.Generator | None = None,
                  ) -> tuple[MlpModel, LoopResult]:
    """Fit the student's softmax to fixed teacher score rows.

    verified may be a VerifiedBatch (the usual case) or a plain feature
    matrix (the no-verification ablation); teacher_softmax gives the target
    rows and defaults to the batch's own scores. The loss is the mean
    squared distance between score vectors, logged per epoch before each
    update.
    """
    cfg.validate()
    if isinstance(verified, VerifiedBatch):
        features = verified.features
        targets = verified.softmax if teacher_softmax is None else \
            nncore.as_matrix(teacher_softmax)
    else:
        if teacher_softmax is None:
            raise ValueError("teacher_softmax is required for a raw feature matrix")
        features = nncore.as_matrix(verified)
        targets = nncore.as_matrix(teacher_softmax)
    if len(features) == 0:
        raise ValueError(
            "nothing to distill: every generated row failed verification; "
            "disable verification, raise features_per_class, or train the "
            "generator longer")
    if len(targets) != len(features):
        raise DimensionError("teacher_softmax row count does not match features")
    if targets.shape[1] != student.output_dim:
        raise DimensionError(
            f"target width {targets.shape[1]} != student classes "
            f"{student.output_dim}")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _STUDENT_STREAM])
    adam = nncore.init_adam(student, lr=cfg.learning_rate)
    result = LoopResult()
    n = len(features)
    for epoch in range(1, cfg.student_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            acts = nncore.forward(student, features[rows])
            probs = nncore.softmax(acts[-1])
            diff = probs - targets[rows]
            losses.append(float((diff ** 2).sum(axis=1).mean()))
            dlogits = _softmax_vjp(probs, 2.0 * diff / len(rows))
            grads, _ = nncore.backward(student, acts, dlogits)
            nncore.adam_step(student, grads, adam)
        result.history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return student, result


def train_unseen_classifier(gen: GeneratorNet, semantics, unseen_ids,
                            cfg: TrainLoopConfig,
                            rng: np.random.Generator | None = None,
                            ) -> tuple[MlpModel, LoopResult]:
    """Supervised classifier for classes the teacher never trained on.

    Synthesizes features_per_class rows per target class from the trained
    generator and fits a linear softmax head by cross-entropy. The head
    spans the full class range so predictions can be restricted to any
    label space afterwards.
    """
    cfg.validate()
    semantics = nncore.as_matrix(semantics)
    ids = [int(c) for c in unseen_ids]
    if not ids:
        raise ValueError("unseen class set is empty")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _UNSEEN_STREAM])
    features, labels = synthesize(gen, semantics, ids, cfg.features_per_class, rng)
    model = nncore.init_mlp([gen.feature_dim, len(semantics)], ["identity"], rng)
    adam = nncore.init_adam(model, lr=cfg.learning_rate)
    result = LoopResult()
    n = len(labels)
    for epoch in range(1, cfg.student_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            acts = nncore.forward(model, features[rows])
            loss, dlogits = nncore.softmax_cross_entropy(acts[-1], labels[rows])
            grads, _ = nncore.backward(model, acts, dlogits)
            nncore.adam_step(model, grads, adam)
            losses.append(loss)
        preds = nncore.forward(model, features)[-1].argmax(axis=1)
        result.history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                               "train_accuracy": float((preds == labels).mean())})
    return model, result


def predict(model: MlpModel, x, label_space) -> np.ndarray:
    """Highest-scoring class restricted to label_space; ties take the
    smallest id."""
    ids = sorted({int(c) for c in label_space})
    if not ids:
        raise ValueError("label space is empty")
    if ids[0] < 0 or ids[-1] >= model.output_dim:
        raise DimensionError(
            f"label space {ids[0]}..{ids[-1]} outside model range "
            f"0..{model.output_dim - 1}")
    logits = nncore.forward(model, x)[-1]
    restricted = logits[:, ids]
    best = restricted.argmax(axis=1)  # first max wins: smallest id on ties
    return np.asarray(ids, dtype=np.int64)[best]
