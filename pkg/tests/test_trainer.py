from __future__ import annotations

import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from conftest import blobs
from oracles import central_difference, cross_entropy, max_relative_error, softmax_rows
from semadc import trainer as tr
from semadc.errors import BadMagicError, ChecksumError, NumericError, TruncatedFileError

# -- forward ------------------------------------------------------------------


def test_zero_head_zero_logits():
    head = tr.HeadParams([np.zeros((5, 3))], [np.zeros(3)])
    np.testing.assert_array_equal(tr.forward(head, np.ones((4, 5))), 0)


def test_identity_head_on_one_hot():
    head = tr.HeadParams([np.eye(4)], [np.zeros(4)])
    x = np.array([[0.0, 3.0, 0.0, 0.0]])
    np.testing.assert_array_equal(tr.forward(head, x), x)


@pytest.mark.parametrize("hidden", [None, 6])
def test_forward_matches_loop_recomputation(hidden):
    head = tr.init_head(5, 3, hidden, seed=2)
    head = head.with_params([p + 0.1 * np.random.default_rng(i).standard_normal(p.shape) for i, p in enumerate(head.params())])
    x = np.random.default_rng(9).standard_normal(5)
    a = x
    for li, (w, b) in enumerate(zip(head.weights, head.biases)):
        a = [sum(a[i] * w[i][j] for i in range(len(a))) + b[j] for j in range(w.shape[1])]
        if li < len(head.weights) - 1:
            a = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in a]
    np.testing.assert_allclose(tr.forward(head, x)[0], a, rtol=1e-12, atol=1e-14)


def test_forward_dim_mismatch():
    with pytest.raises(ValueError):
        tr.forward(tr.init_head(4, 2), np.zeros((1, 5)))


def test_init_is_glorot_uniform():
    head = tr.init_head(300, 200, hidden=None, seed=0)
    a = math.sqrt(6 / 500)
    w = head.weights[0]
    assert np.abs(w).max() <= a
    assert w.std() == pytest.approx(a / math.sqrt(3), rel=0.02)
    np.testing.assert_array_equal(head.biases[0], 0)
    np.testing.assert_array_equal(w, tr.init_head(300, 200, seed=0).weights[0])


def test_representation_shapes():
    x = np.ones((3, 8))
    assert tr.representation(tr.init_head(8, 4, hidden=16), x).shape == (3, 16)
    assert tr.representation(tr.init_head(8, 4), x).shape == (3, 4)


# -- loss ---------------------------------------------------------------------


def test_uniform_logits_loss():
    loss, _ = tr.softmax_cross_entropy(np.zeros((3, 11)), [0, 5, 10])
    assert loss == pytest.approx(math.log(11), rel=1e-15)


def test_two_logit_closed_form():
    loss, _ = tr.softmax_cross_entropy(np.array([[1.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-14)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_extreme_logits_are_stable():
    loss, grad = tr.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))


def test_loss_label_out_of_range():
    with pytest.raises(ValueError):
        tr.softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_loss_gradient_formula(rng):
    z, y = rng.standard_normal((6, 4)), rng.integers(0, 4, 6)
    loss, grad = tr.softmax_cross_entropy(z, y)
    assert loss == pytest.approx(cross_entropy(z, y), rel=1e-13)
    expected = softmax_rows(z)
    expected[np.arange(6), y] -= 1
    np.testing.assert_allclose(grad, expected / 6, rtol=1e-12, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(-500, 500))
def test_softmax_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    z, y = 3 * rng.standard_normal((5, 7)), rng.integers(0, 7, 5)
    l1, _ = tr.softmax_cross_entropy(z, y)
    l2, _ = tr.softmax_cross_entropy(z + c, y)
    assert abs(l1 - l2) < 1e-9


# -- schedule -----------------------------------------------------------------


def test_schedule_examples():
    assert tr.cosine_warmup_lr(0, 1e-3, 0.0, 100, 1000) == 0.0
    assert tr.cosine_warmup_lr(100, 1e-3, 0.0, 100, 1000) == 1e-3
    assert tr.cosine_warmup_lr(550, 1e-3, 0.0, 100, 1000) == pytest.approx(0.5e-3, rel=1e-12)
    assert tr.cosine_warmup_lr(1000, 1e-3, 2e-5, 100, 1000) == 2e-5
    with pytest.raises(ValueError):
        tr.cosine_warmup_lr(1001, 1e-3, 0.0, 100, 1000)


def test_schedule_without_warmup_starts_at_peak():
    assert tr.cosine_warmup_lr(0, 0.5, 0.0, 0, 10) == 0.5


@given(st.integers(2, 400), st.floats(0, 0.99), st.floats(1e-5, 1.0), st.floats(0, 1))
def test_schedule_shape(total, wfrac, peak, minfrac):
    warm = int(wfrac * total)
    lo = peak * minfrac
    lrs = [tr.cosine_warmup_lr(t, peak, lo, warm, total) for t in range(total + 1)]
    assert lrs[warm] == peak
    assert lrs[-1] == pytest.approx(lo, rel=1e-12, abs=1e-18)
    if warm:
        assert lrs[0] == 0.0
    assert all(b >= a for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
    assert all(b <= a + 1e-18 for a, b in zip(lrs[warm:], lrs[warm + 1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(min_lr=1.0, peak_lr=0.1)
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=10, warmup_steps=10)
    assert tr.TrainConfig(epochs=200).warmup == 20


# -- AdamW --------------------------------------------------------------------


def _cfg(**kw):
    return tr.TrainConfig(**{"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01, **kw})


def test_adamw_zero_gradient_no_decay():
    p = [np.array([1.0, -2.0])]
    state = tr.OptimizerState.zeros_like(p)
    out = tr.adamw_step(p, [np.zeros(2)], state, 0.1, _cfg(weight_decay=0.0))
    np.testing.assert_array_equal(out[0], p[0])
    np.testing.assert_array_equal(state.m[0], 0)
    np.testing.assert_array_equal(state.v[0], 0)
    assert state.t == 1


def test_adamw_first_step_hand_value():
    state = tr.OptimizerState.zeros_like([np.array([1.0])])
    out = tr.adamw_step([np.array([1.0])], [np.array([0.5])], state, 0.1, _cfg())
    # m_hat = 0.5, v_hat = 0.25, so the adaptive term is 0.5 / (0.5 + 1e-8)
    exact = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)
    assert abs(out[0][0] - exact) < 1e-9
    assert abs(out[0][0] - 0.899) < 1e-8


@given(st.floats(1e-3, 1e3), st.booleans(), st.floats(1e-4, 1.0))
def test_adamw_first_step_is_signed_lr(gmag, negative, lr):
    g = -gmag if negative else gmag
    state = tr.OptimizerState.zeros_like([np.zeros(1)])
    out = tr.adamw_step([np.array([0.3])], [np.array([g])], state, lr, _cfg(weight_decay=0.0))
    delta = out[0][0] - 0.3
    # exact step is lr * |g| / (|g| + eps), so the slack is eps / |g|
    assert delta == pytest.approx(-lr * math.copysign(1, g), rel=1e-8 / gmag + 1e-12)


@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5), st.integers(1, 50))
def test_adamw_pure_decay_is_geometric(lr, lam, steps):
    cfg = _cfg(weight_decay=lam)
    p = [np.array([2.0, -3.0])]
    state = tr.OptimizerState.zeros_like(p)
    expected = p[0].copy()
    for _ in range(steps):
        p = tr.adamw_step(p, [np.zeros(2)], state, lr, cfg)
        expected = expected * (1 - lr * lam)
        np.testing.assert_array_equal(p[0], expected)


def test_adamw_rejects_nonfinite_gradient():
    with pytest.raises(NumericError):
        tr.adamw_step([np.zeros(2)], [np.array([0.0, np.nan])], tr.OptimizerState.zeros_like([np.zeros(2)]), 0.1, _cfg())


# -- backward -----------------------------------------------------------------


def test_zero_upstream_zero_grads():
    head = tr.init_head(4, 3, hidden=5)
    for g in tr.backward(head, np.ones((2, 4)), np.zeros((2, 3))):
        np.testing.assert_array_equal(g, 0)


def test_linear_outer_product():
    rng = np.random.default_rng(1)
    head = tr.init_head(4, 3)
    x, g = rng.standard_normal((1, 4)), rng.standard_normal((1, 3))
    dw, db = tr.backward(head, x, g)
    np.testing.assert_allclose(dw, np.outer(x[0], g[0]), rtol=1e-15)
    np.testing.assert_allclose(db, g[0], rtol=1e-15)


def head_fd_error(seed: int, hidden) -> float:
    """Max relative error of analytic head gradients vs central differences."""
    rng = np.random.default_rng(seed)
    d, c, b = int(rng.integers(2, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 6))
    head = tr.init_head(d, c, hidden, seed=seed)
    params = [p + 0.3 * rng.standard_normal(p.shape) for p in head.params()]
    head = head.with_params(params)
    x, y = rng.standard_normal((b, d)), rng.integers(0, c, b)
    _, dlogits = tr.softmax_cross_entropy(tr.forward(head, x), y)
    analytic = tr.backward(head, x, dlogits)
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = central_difference(lambda: cross_entropy(tr.forward(head, x), y), p, 1e-5)
        worst = max(worst, max_relative_error(a, numeric, floor=1e-7))
    return worst


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("hidden", [None, 4])
def test_backward_matches_finite_differences(seed, hidden):
    assert head_fd_error(seed, hidden) < 1e-4


# -- training -----------------------------------------------------------------


def test_zero_epochs_returns_init():
    res = tr.train_head(np.ones((2, 3)), [0, 1], 2, tr.TrainConfig(epochs=0, seed=4))
    assert res.history == []
    for a, b in zip(res.head.params(), tr.init_head(3, 2, seed=4).params()):
        np.testing.assert_array_equal(a, b)


def test_separable_blobs_reach_full_train_accuracy():
    rng = np.random.default_rng(0)
    x, y = blobs(rng, 20, [[0, 0], [10, 0]])
    res = tr.train_head(x, y, 2, tr.TrainConfig(epochs=200))
    assert tr.accuracy(res.head, x, y) == 1.0

    # reference: plain logistic regression fitted by a generic optimizer
    def nll(w):
        z = x @ w[:2] + w[2]
        return np.sum(np.logaddexp(0, z) - y * z)

    w = minimize(nll, np.zeros(3), method="BFGS").x
    np.testing.assert_array_equal((x @ w[:2] + w[2] > 0).astype(int), res.head and tr.predict(res.head, x)[1])


def test_training_is_deterministic():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((30, 6)), rng.integers(0, 3, 30)
    cfg = tr.TrainConfig(epochs=40, hidden=8, seed=3)
    a, b = tr.train_head(x, y, 3, cfg), tr.train_head(x, y, 3, cfg)
    assert a.history == b.history
    for p, q in zip(a.head.params(), b.head.params()):
        assert p.tobytes() == q.tobytes()


def test_best_val_snapshot():
    rng = np.random.default_rng(3)
    x, y = blobs(rng, 10, [[0, 0, 0], [2, 0, 0], [0, 2, 0]])
    xv, yv = blobs(rng, 10, [[0, 0, 0], [2, 0, 0], [0, 2, 0]])
    res = tr.train_head(x, y, 3, tr.TrainConfig(epochs=60), val=(xv, yv))
    accs = [h["val_accuracy"] for h in res.history]
    assert res.best_epoch == 1 + int(np.argmax(accs))
    assert tr.accuracy(res.head, xv, yv) == max(accs)
    assert [h["epoch"] for h in res.history] == list(range(1, 61))
    assert res.history[0]["lr"] == tr.schedule_lr(1, tr.TrainConfig(epochs=60))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts():
    # an absurd learning rate blows the logits up to inf after one update
    x = 1e10 * np.random.default_rng(0).standard_normal((4, 3))
    with pytest.raises(NumericError, match="step"):
        tr.train_head(x, [0, 1, 0, 1], 2, tr.TrainConfig(epochs=5, peak_lr=1e300, warmup_steps=0))


def test_train_label_range():
    with pytest.raises(ValueError):
        tr.train_head(np.ones((2, 2)), [0, 2], 2)


# -- predict ------------------------------------------------------------------


def test_predict_zero_head_uniform():
    p, arg = tr.predict(tr.HeadParams([np.zeros((3, 4))], [np.zeros(4)]), np.ones((2, 3)))
    np.testing.assert_allclose(p, 0.25)
    np.testing.assert_array_equal(arg, 0)


def test_predict_rows_and_argmax(rng):
    head = tr.init_head(6, 5, hidden=7, seed=1)
    x = rng.standard_normal((100, 6))
    p, arg = tr.predict(head, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    logits = tr.forward(head, x)
    np.testing.assert_array_equal(arg, [max(range(5), key=lambda j: (row[j], -j)) for row in logits])


# -- checkpoints --------------------------------------------------------------


@pytest.mark.parametrize("hidden", [None, 3])
def test_head_round_trip(tmp_path, hidden):
    head = tr.init_head(4, 2, hidden, seed=5)
    tr.save_head(head, tmp_path / "h.bin")
    back = tr.load_head(tmp_path / "h.bin")
    for a, b in zip(head.params(), back.params()):
        assert a.tobytes() == b.tobytes()


def test_head_layout_matches_hand_encoding(tmp_path):
    w, b = np.arange(6.0).reshape(3, 2), np.array([0.5, -0.5])
    tr.save_head(tr.HeadParams([w], [b]), tmp_path / "h.bin")
    body = b"HEAD" + struct.pack("<HIB", 1, 2, 1) + struct.pack("<II", 3, 2)
    body += struct.pack("<6d", *w.ravel()) + struct.pack("<2d", *b)
    assert (tmp_path / "h.bin").read_bytes() == body + struct.pack("<I", zlib.crc32(body))


def test_head_corruption(tmp_path):
    path = tmp_path / "h.bin"
    tr.save_head(tr.init_head(3, 2), path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(BadMagicError):
        tr.load_head(path)
    path.write_bytes(bytes(raw[:-5]))
    with pytest.raises(TruncatedFileError):
        tr.load_head(path)
    raw[30] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        tr.load_head(path)
