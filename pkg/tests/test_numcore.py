import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retifuse.errors import ConfigError, DegenerateBatchError, DimensionError
from retifuse.numcore import (
    AdamState,
    BatchNorm1d,
    LayerNorm,
    Linear,
    Module,
    PlateauScheduler,
    ReLU,
    adam_step,
    batch_norm_apply,
    binary_cross_entropy,
    finite_diff_check,
    layer_norm_apply,
    linear_apply,
    numeric_gradient,
    plateau_update,
    relative_error,
    relu_apply,
    softmax,
    weighted_cross_entropy,
)


def _linear(w, b):
    layer = Linear(len(w[0]), len(w))
    layer.params["W"][...] = w
    layer.params["b"][...] = b
    return layer


# -- linear ------------------------------------------------------------------

def test_linear_identity():
    out = linear_apply(np.array([[3.0, 4.0]]), _linear(np.eye(2), [0, 0]))
    np.testing.assert_array_equal(out, [[3.0, 4.0]])


def test_linear_hand_example():
    out = linear_apply(np.array([[2.0, 1.0]]), _linear([[1, 1], [1, -1]], [0.5, 0]))
    np.testing.assert_array_equal(out, [[3.5, 1.0]])


def test_linear_backward_hand_example():
    layer = _linear([[1, 1], [1, -1]], [0.5, 0])
    layer.forward(np.array([[2.0, 1.0]]))
    dx = layer.backward(np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(layer.grads["W"], [[2, 1], [0, 0]])
    np.testing.assert_array_equal(layer.grads["b"], [1, 0])
    np.testing.assert_array_equal(dx, [[1, 1]])


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_apply(np.zeros((2, 3)), Linear(4, 2))


def test_linear_gradients_accumulate_until_zeroed():
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    x = rng.standard_normal((4, 3))
    dy = rng.standard_normal((4, 2))
    layer.forward(x)
    layer.backward(dy)
    once = layer.grads["W"].copy()
    layer.forward(x)
    layer.backward(dy)
    np.testing.assert_allclose(layer.grads["W"], 2 * once)
    layer.zero_grad()
    assert not layer.grads["W"].any()


def test_uniform_init_bounds():
    layer = Linear(16, 8, np.random.default_rng(3))
    assert np.abs(layer.params["W"]).max() <= 1 / math.sqrt(16)
    assert np.abs(layer.params["b"]).max() <= 1 / math.sqrt(16)


# -- relu --------------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(relu_apply(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([0.5, 1.0, 3.0])
    np.testing.assert_array_equal(relu_apply(x), x)
    r = ReLU()
    r.forward(np.array([-1.0]))
    assert r.backward(np.array([5.0]))[0] == 0.0


# -- layer norm --------------------------------------------------------------

def test_layer_norm_hand_example():
    out = layer_norm_apply(np.array([[1.0, 2, 3, 4]]), np.ones(4), np.zeros(4), 1e-5)
    np.testing.assert_allclose(out, [[-1.3416, -0.4472, 0.4472, 1.3416]], atol=1e-3)


def test_layer_norm_constant_row_and_zero_gamma():
    np.testing.assert_allclose(layer_norm_apply(np.full((1, 4), 5.0), np.ones(4), np.zeros(4)), 0, atol=1e-12)
    beta = np.array([0.1, -0.2, 0.3])
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(layer_norm_apply(x, np.zeros(3), beta), np.broadcast_to(beta, (5, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.floats(0.5, 50.0))
def test_layer_norm_row_moments(seed, d, scale):
    x = np.random.default_rng(seed).standard_normal((3, d)) * scale
    out = LayerNorm(d).forward(x)
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)
    var = out.var(axis=1)
    expected = x.var(axis=1) / (x.var(axis=1) + 1e-5)
    np.testing.assert_allclose(var, expected, atol=1e-9)


# -- batch norm --------------------------------------------------------------

def test_batch_norm_standardized_input_unchanged():
    x = np.array([[-1.0, 1.0], [1.0, -1.0]])
    np.testing.assert_allclose(batch_norm_apply(x, BatchNorm1d(2), "train"), x, atol=1e-5)


def test_batch_norm_eval_uses_running_stats():
    bn = BatchNorm1d(3)
    mu = np.array([0.5, -2.0, 3.0])
    bn.buffers["running_mean"][...] = mu
    bn.buffers["running_var"][...] = 1.0
    np.testing.assert_allclose(batch_norm_apply(mu[None, :], bn, "eval"), 0, atol=1e-12)


def test_batch_norm_running_mean_two_updates():
    bn = BatchNorm1d(2)
    x = np.array([[1.0, 4.0], [3.0, 8.0]])
    batch_norm_apply(x, bn, "train")
    batch_norm_apply(x, bn, "train")
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.19 * x.mean(axis=0), rtol=1e-12)


def test_batch_norm_single_sample_train_rejected():
    with pytest.raises(DegenerateBatchError):
        BatchNorm1d(4).forward(np.zeros((1, 4)))
    bn = BatchNorm1d(4).eval()
    assert bn.forward(np.zeros((1, 4))).shape == (1, 4)


# -- losses ------------------------------------------------------------------

def test_weighted_ce_uniform_logits():
    loss, _ = weighted_cross_entropy(np.zeros((3, 5)), [0, 3, 4], [0.26, 3.59, 1.72, 11.9, 4.6])
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_weighted_ce_hand_example():
    loss, _ = weighted_cross_entropy(np.array([[1.0, 0], [0, 1.0]]), [0, 1], [1.0, 3.0])
    assert loss == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_weighted_ce_large_gap_goes_to_zero():
    loss, _ = weighted_cross_entropy(np.array([[800.0, 0, 0]]), [0], [1, 1, 1])
    assert loss == pytest.approx(0.0, abs=1e-300)


def test_weighted_ce_rejects_bad_weights():
    with pytest.raises(ConfigError):
        weighted_cross_entropy(np.zeros((1, 2)), [0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_weighted_ce_equal_weights_is_plain_ce(seed, w):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((7, 5))
    y = rng.integers(0, 5, 7)
    loss, _ = weighted_cross_entropy(logits, y, np.full(5, w))
    plain = -np.mean(np.log(softmax(logits)[np.arange(7), y]))
    assert loss == pytest.approx(plain, rel=1e-12)


def test_bce_examples():
    assert binary_cross_entropy(np.array([0.5, 0.5]), np.array([0, 1]))[0] == pytest.approx(math.log(2))
    assert binary_cross_entropy(np.array([0.0, 1.0]), np.array([0, 1]))[0] == pytest.approx(0, abs=1e-6)
    assert binary_cross_entropy(np.array([0.8]), np.array([0]))[0] == pytest.approx(-math.log(0.2), abs=1e-12)


def test_bce_gradient_zero_where_clamped():
    _, dp = binary_cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(dp, 0.0)


# -- adam --------------------------------------------------------------------

def test_adam_first_step_hand_value():
    theta = {"w": np.zeros(1)}
    adam_step(theta, {"w": np.array([0.5])}, AdamState(lr=1e-3))
    assert theta["w"][0] == pytest.approx(-1e-3, abs=1e-6)


def test_adam_zero_grad_keeps_params():
    theta = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(theta, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(theta["w"], [1.0, -2.0])
    assert state.t == 3


def test_adam_constant_grad_steps_are_lr():
    theta = {"w": np.array([0.0])}
    state = AdamState(lr=1e-3)
    prev = 0.0
    for _ in range(2):
        adam_step(theta, {"w": np.array([2.0])}, state)
        assert theta["w"][0] - prev == pytest.approx(-1e-3, rel=1e-4)
        prev = theta["w"][0]


def test_adam_is_deterministic_and_checks_shapes():
    rng = np.random.default_rng(1)
    g = {"w": rng.standard_normal((3, 2))}
    a, b = {"w": np.ones((3, 2))}, {"w": np.ones((3, 2))}
    adam_step(a, g, AdamState())
    adam_step(b, g, AdamState())
    assert a["w"].tobytes() == b["w"].tobytes()
    with pytest.raises(DimensionError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())


# -- plateau scheduler -------------------------------------------------------

def test_plateau_improving_keeps_lr():
    s = PlateauScheduler(lr=1e-3)
    assert [plateau_update(s, v) for v in (1.0, 0.9, 0.8)] == [1e-3] * 3


def test_plateau_halves_once_after_five_stagnant():
    s = PlateauScheduler(lr=1e-3)
    lrs = [s.step(v) for v in [1.0] * 6]
    assert lrs == [1e-3] * 5 + [5e-4]


def test_plateau_floor():
    s = PlateauScheduler(lr=1e-6, min_lr=1e-6)
    assert all(s.step(1.0) == 1e-6 for _ in range(20))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=60))
def test_plateau_lr_non_increasing_and_reference(losses):
    s = PlateauScheduler(lr=1e-3)
    lr, best, since, prev = 1e-3, math.inf, 0, 1e-3
    for v in losses:
        got = s.step(v)
        if v < best:
            best, since = v, 0
        else:
            since += 1
            if since == 5:
                lr, since = max(lr / 2, 1e-6), 0
        assert got == lr
        assert got <= prev
        prev = got


# -- finite differences ------------------------------------------------------

def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([2.0])) == 0.0


def test_fd_check_linear_random():
    rng = np.random.default_rng(0)
    assert finite_diff_check(Linear(4, 3, rng), rng.standard_normal((3, 4))) < 1e-4


def test_fd_check_relu_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert finite_diff_check(ReLU(), x) < 1e-4


def test_fd_check_layer_norm_and_batch_norm():
    rng = np.random.default_rng(2)
    ln = LayerNorm(6)
    ln.params["gamma"][...] = rng.uniform(0.5, 1.5, 6)
    ln.params["beta"][...] = rng.standard_normal(6)
    assert finite_diff_check(ln, rng.standard_normal((3, 6))) < 1e-4
    bn = BatchNorm1d(5)
    before = bn.buffers["running_mean"].copy()
    assert finite_diff_check(bn, rng.standard_normal((6, 5))) < 1e-4
    np.testing.assert_array_equal(bn.buffers["running_mean"], before)


def test_numeric_gradient_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_gradient(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * np.array([1.0, -2.0, 3.0]), rtol=1e-8)


def test_fd_check_rejects_bad_step():
    with pytest.raises(ConfigError):
        finite_diff_check(Linear(2, 2), np.zeros((1, 2)), h=0)


# -- module plumbing ---------------------------------------------------------

class _Two(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.a = self.add_child("a", Linear(3, 4, rng))
        self.bn = self.add_child("bn", BatchNorm1d(4))


def test_state_dict_roundtrip_and_mismatch():
    src, dst = _Two(), _Two()
    src.a.params["W"] += 1.0
    src.bn.buffers["running_var"][...] = 3.0
    dst.load_state_dict(src.state_dict())
    np.testing.assert_array_equal(dst.a.params["W"], src.a.params["W"])
    np.testing.assert_array_equal(dst.bn.buffers["running_var"], 3.0)
    state = src.state_dict()
    state.pop("a.b")
    with pytest.raises(DimensionError):
        dst.load_state_dict(state)


def test_train_eval_propagates():
    m = _Two().eval()
    assert not m.bn.training
    m.train()
    assert m.bn.training
