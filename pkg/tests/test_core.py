import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from locfuse import core
from locfuse.core import Param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(loss, analytic, x, tol, eps=1e-5):
    num = core.numeric_grad(loss, x, eps)
    err = core.rel_error(analytic, num)
    assert err < tol, err


# -- matmul


def test_matmul_identity_and_zero(rng):
    b = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(core.matmul(np.eye(3), b), b)
    np.testing.assert_array_equal(core.matmul(np.zeros((4, 3)), b), np.zeros((4, 2)))


def test_matmul_shape_mismatch_reports_dims():
    with pytest.raises(core.ShapeError, match=r"\(4, 5\).*\(4, 3\)"):
        core.matmul(np.ones((4, 5)), np.ones((4, 3)))


def test_matmul_grad(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    da, db = core.matmul_backward(w, a, b)
    f = lambda: float(np.sum(core.matmul(a, b) * w))
    fd_check(f, da, a, 1e-7)
    fd_check(f, db, b, 1e-7)


def test_matmul_batched_weight_grad(rng):
    a, b = rng.normal(size=(2, 4, 5)), rng.normal(size=(5, 3))
    w = rng.normal(size=(2, 4, 3))
    da, db = core.matmul_backward(w, a, b)
    assert db.shape == b.shape
    fd_check(lambda: float(np.sum(core.matmul(a, b) * w)), db, b, 1e-7)


# -- softmax


def test_softmax_uniform_and_overflow():
    np.testing.assert_allclose(core.softmax_rows(np.zeros((1, 5))), np.full((1, 5), 0.2))
    np.testing.assert_array_equal(core.softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]])


def test_softmax_all_masked_row_is_zero():
    out = core.softmax_rows(np.array([[-np.inf, -np.inf], [0.0, -np.inf]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0], [1.0, 0.0]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = core.softmax_rows(x)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_jacobian(rng):
    x = rng.normal(size=(1, 6))
    w = rng.normal(size=(1, 6))
    dx = core.softmax_rows_backward(w, core.softmax_rows(x))
    fd_check(lambda: float(np.sum(core.softmax_rows(x) * w)), dx, x, 1e-6)


# -- layer norm


def test_layer_norm_constant_row_gives_bias():
    bias = np.array([0.1, -0.2, 0.3])
    y, _ = core.layer_norm(np.full((2, 3), 7.0), np.ones(3), bias)
    np.testing.assert_allclose(y, np.broadcast_to(bias, (2, 3)))


def test_layer_norm_normalized_row():
    y, _ = core.layer_norm(np.array([[-1.0, 1.0]]), np.ones(2), np.zeros(2), eps=1e-12)
    np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_grads(rng):
    x = rng.normal(size=(3, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    y, cache = core.layer_norm(x, g, b)
    dx, dg, db = core.layer_norm_backward(w, cache)
    f = lambda: float(np.sum(core.layer_norm(x, g, b)[0] * w))
    fd_check(f, dx, x, 1e-5)
    fd_check(f, dg, g, 1e-5)
    fd_check(f, db, b, 1e-5)


# -- feed-forward


def test_ffn_zero_weights_give_bias(rng):
    x = rng.normal(size=(4, 3))
    b2 = np.array([0.5, -1.0, 2.0])
    y, _ = core.ffn(x, np.zeros((3, 12)), rng.normal(size=12), np.zeros((12, 3)), b2)
    np.testing.assert_array_equal(y, np.broadcast_to(b2, (4, 3)))
    y, _ = core.ffn(x, rng.normal(size=(3, 12)), rng.normal(size=12), np.zeros((12, 3)), np.zeros(3))
    np.testing.assert_array_equal(y, np.zeros((4, 3)))


def test_ffn_grads(rng):
    d, h = 3, 12
    args = [rng.normal(size=(4, d)), rng.normal(size=(d, h)), rng.normal(size=h),
            rng.normal(size=(h, d)), rng.normal(size=d)]
    w = rng.normal(size=(4, d))
    _, cache = core.ffn(*args)
    grads = core.ffn_backward(w, cache)
    f = lambda: float(np.sum(core.ffn(*args)[0] * w))
    for x, g in zip(args, grads):
        fd_check(f, g, x, 1e-5)


# -- low-rank adapter


def test_lora_zero_b_and_zero_scale(rng):
    x, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 5))
    a, b = rng.normal(size=(6, 2)), rng.normal(size=(2, 5))
    y, _ = core.lora_linear(x, w, a, np.zeros((2, 5)), 2.0)
    np.testing.assert_array_equal(y, x @ w)
    y, _ = core.lora_linear(x, w, a, b, 0.0)
    np.testing.assert_array_equal(y, x @ w)


def test_lora_rank_too_large(rng):
    with pytest.raises(core.ShapeError, match="rank"):
        core.lora_linear(np.ones((1, 3)), np.ones((3, 2)), np.ones((3, 3)), np.ones((3, 2)), 1.0)
    with pytest.raises(core.ShapeError):
        core.LoRALinear("x", np.ones((3, 2)), 3, 1.0, rng)


def test_lora_layer_grads_skip_frozen(rng):
    layer = core.LoRALinear("l", rng.normal(size=(6, 5)), 2, 2.0, rng)
    layer.b.value[...] = rng.normal(size=(2, 5))
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 5))
    y, cache = layer.forward(x)
    layer.backward(w, cache)
    assert np.all(layer.w.grad == 0)
    assert np.any(layer.a.grad != 0) and np.any(layer.b.grad != 0)
    f = lambda: float(np.sum(layer.forward(x)[0] * w))
    fd_check(f, layer.a.grad, layer.a.value, 1e-6)
    fd_check(f, layer.b.grad, layer.b.value, 1e-6)


# -- cross entropy


def test_cross_entropy_perfect_and_uniform():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 3] = 50.0
    loss, _ = core.cross_entropy(logits, np.array([1, 3]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = core.cross_entropy(np.zeros((5, 32)), np.arange(5))
    assert loss == pytest.approx(math.log(32))
    assert math.log(32) == pytest.approx(3.4657, abs=1e-4)


def test_cross_entropy_mask_and_range():
    logits = np.zeros((1, 3, 4))
    logits[0, 0, 0] = 100.0
    loss, _ = core.cross_entropy(logits, np.array([[1, 2, 2]]), np.array([[False, True, True]]))
    assert loss == pytest.approx(math.log(4))
    with pytest.raises(ValueError, match="out of range"):
        core.cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_cross_entropy_grad(rng):
    logits = rng.normal(size=(2, 3, 7))
    t = rng.integers(0, 7, size=(2, 3))
    mask = np.array([[True, False, True], [True, True, False]])
    _, cache = core.cross_entropy(logits, t, mask)
    g = core.cross_entropy_backward(cache)
    fd_check(lambda: core.cross_entropy(logits, t, mask)[0], g, logits, 1e-6)


# -- gelu


def test_gelu_grad(rng):
    x = rng.normal(size=(3, 4)) * 2
    w = rng.normal(size=(3, 4))
    fd_check(lambda: float(np.sum(core.gelu(x) * w)), core.gelu_backward(w, x), x, 1e-7)


# -- optimizer and schedule


def test_schedule_endpoints():
    s = core.WarmupCosine(warmup=10, total=100)
    assert s.factor(0) == 0.0
    assert s.factor(5) == pytest.approx(0.5)
    assert s.factor(10) == pytest.approx(1.0)
    assert s.factor(100) == 0.0
    assert s.factor(99) > 0


def test_adam_descends_on_square():
    w = Param(np.array([1.0]))
    opt = core.AdamW({"g": [w]}, {"g": 0.1})
    w.grad[...] = 2 * w.value
    opt.step(0)
    assert abs(w.value[0]) < 1.0


def test_negative_lr_rejected():
    with pytest.raises(ValueError, match="negative"):
        core.AdamW({"g": [Param(np.zeros(1))]}, {"g": -1e-3})


def test_frozen_params_untouched_by_optimizer():
    w = Param(np.ones(3), trainable=False)
    w.grad[...] = 5.0
    core.AdamW({"g": [w]}, {"g": 1.0}).step(0)
    np.testing.assert_array_equal(w.value, np.ones(3))


def test_zero_grads_roundtrip(rng):
    layer = core.LayerNorm("ln", 4)
    core.zero_grads(layer.params())
    y, c = layer.forward(rng.normal(size=(2, 4)))
    layer.backward(rng.normal(size=(2, 4)), c)
    core.zero_grads(layer.params())
    for p in layer.params():
        assert np.all(p.grad == 0)


# -- determinism


def test_rng_streams_reproducible():
    a = core.make_rng(7, "fusion").normal(size=5)
    b = core.make_rng(7, "fusion").normal(size=5)
    c = core.make_rng(7, "decoder").normal(size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_identical_seed_identical_update_trace():
    def run():
        rng = core.make_rng(3, "t")
        layer = core.FeedForward("f", core.xavier_uniform(rng, 4, 8), np.zeros(8),
                                 core.xavier_uniform(rng, 8, 4), np.zeros(4))
        opt = core.AdamW({"g": layer.params()}, {"g": 1e-2})
        x = rng.normal(size=(5, 4))
        trace = []
        for step in range(5):
            core.zero_grads(layer.params())
            y, c = layer.forward(x)
            layer.backward(2 * y, c)
            opt.step(step)
            trace.append(np.concatenate([p.value.ravel() for p in layer.params()]))
        return np.array(trace)

    np.testing.assert_array_equal(run(), run())
