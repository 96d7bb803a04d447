"""Kernel tests: forward/backward/Adam/CE against independent oracles."""
import math

import numpy as np
import pytest

from sentinelzsl import nncore


def tiny_model(seed=0, dims=(5, 7, 4, 3), acts=("leaky_relu", "relu", "identity")):
    rng = np.random.default_rng(seed)
    return nncore.init_mlp(list(dims), list(acts), rng)


# --- forward ---------------------------------------------------------------

def oracle_forward(model, batch):
    """Throwaway re-implementation: explicit per-row, per-unit loops."""
    rows = [np.array(r, dtype=float) for r in batch]
    for w, b, act in zip(model.weights, model.biases, model.activations):
        nxt = []
        for r in rows:
            out = np.empty(w.shape[1])
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += r[i] * w[i, j]
                if act == "relu":
                    s = max(s, 0.0)
                elif act == "leaky_relu":
                    s = s if s > 0 else nncore.LEAKY_SLOPE * s
                out[j] = s
            nxt.append(out)
        rows = nxt
    return np.stack(rows)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_loop_oracle(seed):
    model = tiny_model(seed)
    rng = np.random.default_rng(100 + seed)
    batch = rng.normal(size=(6, 5))
    out = nncore.forward(model, batch)[-1]
    np.testing.assert_allclose(out, oracle_forward(model, batch), rtol=1e-12, atol=1e-12)


def test_forward_returns_all_activations():
    model = tiny_model()
    batch = np.zeros((3, 5))
    acts = nncore.forward(model, batch)
    assert len(acts) == 4
    assert acts[0] is batch or np.array_equal(acts[0], batch)
    assert [a.shape for a in acts] == [(3, 5), (3, 7), (3, 4), (3, 3)]


def test_forward_rejects_bad_width():
    with pytest.raises(nncore.DimensionError):
        nncore.forward(tiny_model(), np.zeros((2, 9)))


def test_forward_rejects_nan():
    batch = np.zeros((2, 5))
    batch[1, 3] = np.nan
    with pytest.raises(ValueError):
        nncore.forward(tiny_model(), batch)


def test_init_bounds_and_determinism():
    m1 = tiny_model(7)
    m2 = tiny_model(7)
    for w1, w2 in zip(m1.weights, m2.weights):
        np.testing.assert_array_equal(w1, w2)
    for w, fan_in in zip(m1.weights, (5, 7, 4)):
        assert np.all(np.abs(w) <= 1.0 / math.sqrt(fan_in))
    for b in m1.biases:
        assert not b.any()


# --- softmax / cross-entropy -----------------------------------------------

def oracle_ce(logits, labels):
    """Direct formula with plain math: mean of -log softmax[label]."""
    total = 0.0
    for row, y in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total += -math.log(exps[y] / sum(exps))
    return total / len(labels)


@pytest.mark.parametrize("seed", [0, 3, 9])
def test_cross_entropy_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3.0, size=(8, 4))
    labels = rng.integers(0, 4, size=8)
    loss, _ = nncore.softmax_cross_entropy(logits, labels)
    assert loss == pytest.approx(oracle_ce(logits, labels), rel=1e-12)


def test_softmax_rows_normalized_and_shift_invariant():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 6)) * 50
    p = nncore.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, nncore.softmax(logits + 123.0), atol=1e-12)
    assert np.all(p >= 0)


def test_softmax_extreme_logits_stay_finite():
    p = nncore.softmax(np.array([[1000.0, -1000.0, 0.0]]))
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0)


def test_ce_gradient_is_softmax_minus_onehot_over_n():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    _, dlogits = nncore.softmax_cross_entropy(logits, labels)
    expect = nncore.softmax(logits)
    for i, y in enumerate(labels):
        expect[i, y] -= 1.0
    np.testing.assert_allclose(dlogits, expect / 4.0, atol=1e-12)


def test_ce_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        nncore.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


# --- backward ---------------------------------------------------------------

def oracle_numeric_grads(model, batch, labels, eps=1e-6):
    """Independent central finite differences over every coordinate."""
    def loss():
        out = nncore.forward(model, batch)[-1]
        return nncore.softmax_cross_entropy(out, labels)[0]

    grads = []
    for tensor in model.weights + model.biases + [batch]:
        g = np.zeros_like(tensor)
        flat, gflat = tensor.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss()
            flat[i] = orig - eps
            lo = loss()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_numeric_oracle(seed):
    model = tiny_model(seed, dims=(4, 6, 3), acts=("leaky_relu", "identity"))
    rng = np.random.default_rng(50 + seed)
    batch = rng.normal(size=(5, 4))
    labels = rng.integers(0, 3, size=5)

    acts = nncore.forward(model, batch)
    _, dlogits = nncore.softmax_cross_entropy(acts[-1], labels)
    grads, input_grad = nncore.backward(model, acts, dlogits)

    numeric = oracle_numeric_grads(model, batch, labels)
    analytic = grads.arrays() + [input_grad]
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)


def test_finite_diff_check_accepts_true_gradients():
    model = tiny_model(3)
    rng = np.random.default_rng(33)
    batch = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)
    assert nncore.finite_diff_check(model, batch, labels, rng=np.random.default_rng(1)) < 1e-4


def test_finite_diff_check_flags_corrupted_backward(monkeypatch):
    model = tiny_model(3)
    rng = np.random.default_rng(33)
    batch = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)

    real_backward = nncore.backward

    def doubled(model, acts, output_grad):
        grads, input_grad = real_backward(model, acts, output_grad)
        grads.weights[0] = grads.weights[0] * 2.0
        return grads, input_grad

    monkeypatch.setattr(nncore, "backward", doubled)
    assert nncore.finite_diff_check(model, batch, labels, rng=np.random.default_rng(1)) > 0.5


def test_backward_per_sample_deltas_row_structure():
    # Zeroing one sample's output_grad row must zero exactly its delta rows.
    model = tiny_model(2)
    rng = np.random.default_rng(8)
    batch = rng.normal(size=(4, 5))
    acts = nncore.forward(model, batch)
    ograd = rng.normal(size=acts[-1].shape)
    ograd[2] = 0.0
    deltas = nncore.backward_deltas(model, acts, ograd)
    for d in deltas:
        assert not d[2].any()
        assert d[[0, 1, 3]].any()


# --- Adam --------------------------------------------------------------------

def oracle_adam_sequence(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar recurrence written independently of the package code."""
    p = float(p0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p -= lr * mh / (math.sqrt(vh) + eps)
    return p


def test_adam_matches_scalar_recurrence():
    model = nncore.MlpModel([np.array([[0.25]])], [np.array([-0.5])], ["identity"])
    state = nncore.init_adam(model, lr=0.05)
    rng = np.random.default_rng(11)
    w_grads = rng.normal(size=6)
    b_grads = rng.normal(size=6)
    for gw, gb in zip(w_grads, b_grads):
        nncore.adam_step(
            model, nncore.GradBundle([np.array([[gw]])], [np.array([gb])]), state
        )
    assert model.weights[0][0, 0] == pytest.approx(
        oracle_adam_sequence(0.25, w_grads, 0.05), abs=1e-12)
    assert model.biases[0][0] == pytest.approx(
        oracle_adam_sequence(-0.5, b_grads, 0.05), abs=1e-12)
    assert state.step == 6


def test_adam_first_step_size_is_lr():
    # Bias correction makes the very first update exactly lr * sign(g).
    model = nncore.MlpModel([np.array([[1.0]])], [np.array([0.0])], ["identity"])
    state = nncore.init_adam(model, lr=0.01)
    g = nncore.GradBundle([np.array([[0.37]])], [np.array([0.0])])
    nncore.adam_step(model, g, state)
    assert model.weights[0][0, 0] == pytest.approx(1.0 - 0.01, rel=1e-6)


def test_adam_rejects_mismatched_shapes():
    model = tiny_model()
    state = nncore.init_adam(model, lr=0.1)
    bad = nncore.zeros_grads(model)
    bad.weights[1] = np.zeros((2, 2))
    with pytest.raises(nncore.DimensionError):
        nncore.adam_step(model, bad, state)


# --- GradBundle helpers ------------------------------------------------------

def test_grad_bundle_norm_and_scale():
    g = nncore.GradBundle([np.array([[3.0, 0.0]])], [np.array([4.0])])
    assert g.global_norm() == pytest.approx(5.0)
    h = g.scale(0.5)
    assert h.global_norm() == pytest.approx(2.5)
    # original untouched
    assert g.weights[0][0, 0] == 3.0


def test_model_copy_is_deep():
    m = tiny_model()
    c = m.copy()
    c.weights[0][0, 0] += 100.0
    assert m.weights[0][0, 0] != c.weights[0][0, 0]
