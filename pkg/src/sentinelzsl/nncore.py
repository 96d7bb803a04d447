"""Minimal deterministic neural-network kernel.

Dense float64 matrices, MLP forward/backward with LeakyReLU/ReLU/identity
layers, softmax cross-entropy, Adam, and a finite-difference gradient
oracle used by the test suites. Everything is a pure function over value
types; no global state, no hidden RNG.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.01

ACTIVATIONS = ("leaky_relu", "relu", "identity")


class DimensionError(ValueError):
    """Input shape disagrees with the model layout."""


def as_matrix(data) -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf entries")
    return m


@dataclass
class MlpModel:
    """Fully-connected net: layer l maps (dims[l],) -> (dims[l+1],).

    weights[l] has shape (dims[l], dims[l+1]); biases[l] has shape
    (dims[l+1],); activations[l] is applied after the affine map.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must align per layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} in layer {i}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i - 1} output dim {self.weights[i - 1].shape[1]} "
                    f"!= layer {i} input dim {w.shape[0]}"
                )

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_mlp(layer_dims, activations, rng: np.random.Generator) -> MlpModel:
    """Build an MLP with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if len(activations) != len(layer_dims) - 1:
        raise DimensionError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, list(activations))


def _apply_activation(pre: np.ndarray, act: str) -> np.ndarray:
    if act == "identity":
        return pre
    if act == "relu":
        return np.maximum(pre, 0.0)
    return np.where(pre > 0.0, pre, LEAKY_SLOPE * pre)


def _activation_mask(post: np.ndarray, act: str) -> np.ndarray:
    # Recovers d(post)/d(pre) from the post-activation alone: signs are
    # preserved by leaky_relu (slope > 0) and zeros stay zero for relu.
    if act == "identity":
        return np.ones_like(post)
    if act == "relu":
        return (post > 0.0).astype(np.float64)
    return np.where(post > 0.0, 1.0, LEAKY_SLOPE)


def forward(model: MlpModel, batch: np.ndarray) -> list[np.ndarray]:
    """Run the net; returns [input, act_1, ..., act_L] with the output last."""
    batch = as_matrix(batch)
    if batch.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch has {batch.shape[1]} features, model expects {model.input_dim}"
        )
    acts = [batch]
    for w, b, act in zip(model.weights, model.biases, model.activations):
        acts.append(_apply_activation(acts[-1] @ w + b, act))
    return acts


@dataclass
class GradBundle:
    """Per-layer parameter gradients, shape-congruent with an MlpModel."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "GradBundle":
        return GradBundle([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        return self.weights + self.biases

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def scale(self, factor: float) -> "GradBundle":
        return GradBundle([w * factor for w in self.weights], [b * factor for b in self.biases])


def zeros_grads(model: MlpModel) -> GradBundle:
    return GradBundle(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
    )


def backward_deltas(model: MlpModel, acts: list[np.ndarray], output_grad: np.ndarray) -> list[np.ndarray]:
    """Per-layer dLoss/dpre matrices (rows stay per-sample), deepest layer last."""
    output_grad = as_matrix(output_grad)
    if output_grad.shape != acts[-1].shape:
        raise DimensionError(
            f"output_grad shape {output_grad.shape} != output shape {acts[-1].shape}"
        )
    deltas = [None] * len(model.weights)
    grad = output_grad
    for layer in range(len(model.weights) - 1, -1, -1):
        dpre = grad * _activation_mask(acts[layer + 1], model.activations[layer])
        deltas[layer] = dpre
        grad = dpre @ model.weights[layer].T
    return deltas


def backward(model: MlpModel, acts: list[np.ndarray], output_grad: np.ndarray):
    """Backprop through the net.

    Returns (GradBundle, input_grad): parameter gradients plus the gradient
    w.r.t. the input batch, which is what the sentinel ships back in the
    white-box protocol instead of any weights.
    """
    deltas = backward_deltas(model, acts, output_grad)
    dw = [acts[layer].T @ deltas[layer] for layer in range(len(deltas))]
    db = [deltas[layer].sum(axis=0) for layer in range(len(deltas))]
    input_grad = deltas[0] @ model.weights[0].T
    return GradBundle(dw, db), input_grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    logits = as_matrix(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean CE loss over the batch plus d(loss)/d(logits).

    dlogits = (softmax - onehot) / batch_size. Probabilities are clamped at
    1e-12 before the log.
    """
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    probs = softmax(logits)
    picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


@dataclass
class AdamState:
    """Adam accumulators; shapes mirror the model, step counts from 0."""

    m: GradBundle
    v: GradBundle
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(model: MlpModel, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(zeros_grads(model), zeros_grads(model), 0, lr, beta1, beta2, eps)


def adam_step(model: MlpModel, grads: GradBundle, state: AdamState) -> None:
    """Standard bias-corrected Adam update, applied to the model in place."""
    state.step += 1
    t = state.step
    params = model.weights + model.biases
    gs = grads.arrays()
    ms = state.m.arrays()
    vs = state.v.arrays()
    for p, g, m, v in zip(params, gs, ms, vs):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def model_to_dict(model: MlpModel) -> dict:
    """JSON-ready description of an MLP (dims, activations, parameters)."""
    return {
        "layer_dims": model.layer_dims,
        "activations": list(model.activations),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(data: dict) -> MlpModel:
    """Inverse of model_to_dict; validates shape consistency on construction."""
    try:
        weights = [np.asarray(w, dtype=np.float64) for w in data["weights"]]
        biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        activations = list(data["activations"])
    except KeyError as exc:
        raise ValueError(f"model document missing field {exc.args[0]!r}") from None
    model = MlpModel(weights, biases, activations)
    if "layer_dims" in data and list(data["layer_dims"]) != model.layer_dims:
        raise DimensionError("layer_dims field disagrees with weight shapes")
    return model


def _relative_error(analytic: float, numeric: float) -> float:
    denom = max((abs(analytic) + abs(numeric)) / 2.0, 1e-6)
    return abs(analytic - numeric) / denom


def finite_diff_check(model: MlpModel, batch: np.ndarray, labels, epsilon: float = 1e-5,
                      rng: np.random.Generator | None = None,
                      max_coords: int = 200) -> float:
    """Max relative error of backward() vs central finite differences.

    Samples at most ``max_coords`` coordinates per tensor (all weights,
    biases and the input batch) of the CE loss.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    batch = as_matrix(batch)

    acts = forward(model, batch)
    _, dlogits = softmax_cross_entropy(acts[-1], labels)
    grads, input_grad = backward(model, acts, dlogits)

    def loss_at(b):
        out = forward(model, b)[-1]
        return softmax_cross_entropy(out, labels)[0]

    worst = 0.0
    tensors = list(zip(model.weights + model.biases + [batch],
                       grads.arrays() + [input_grad]))
    for tensor, analytic in tensors:
        flat = tensor.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = loss_at(batch)
            flat[i] = orig - epsilon
            minus = loss_at(batch)
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            worst = max(worst, _relative_error(a_flat[i], numeric))
    return worst
