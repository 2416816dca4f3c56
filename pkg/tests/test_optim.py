import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spe.autodiff import Parameter
from spe.optim import AdamState, adam_step, clip_by_batch_norm, global_norm


def _adam_reference(g_seq, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam, written out step by step."""
    p, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_first_step_moves_by_learning_rate():
    p = Parameter(np.array(0.0), "p")
    state = AdamState()
    adam_step({"p": p}, {"p": np.array(1.0)}, state)
    assert state.t == 1
    assert float(p.data) == pytest.approx(-1e-4, rel=1e-6)


def test_second_identical_step_is_similar():
    p = Parameter(np.array(0.0), "p")
    state = AdamState()
    adam_step({"p": p}, {"p": np.array(1.0)}, state)
    d1 = float(p.data)
    adam_step({"p": p}, {"p": np.array(1.0)}, state)
    d2 = float(p.data) - d1
    assert d2 < 0 and d1 < 0
    assert abs(abs(d2) - abs(d1)) <= 0.01 * abs(d1)


def test_matches_reference_over_many_steps():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=20)
    p = Parameter(np.array(0.0), "p")
    state = AdamState(lr=1e-3)
    for g in gs:
        adam_step({"p": p}, {"p": np.array(g)}, state)
    assert float(p.data) == pytest.approx(_adam_reference(gs, lr=1e-3)[-1], rel=1e-12)


def test_zero_gradient_leaves_params_and_counts_step():
    p = Parameter(np.array([1.0, 2.0]), "p")
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.t == 1


def test_moments_match_parameter_shapes():
    p = Parameter(np.ones((2, 3)), "p")
    state = AdamState()
    adam_step({"p": p}, {"p": np.ones((2, 3))}, state)
    assert state.m["p"].shape == (2, 3) and state.v["p"].shape == (2, 3)


def test_shape_mismatch_and_non_finite_rejected():
    p = Parameter(np.ones(3), "p")
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.ones(2)}, AdamState())
    with pytest.raises(FloatingPointError):
        adam_step({"p": p}, {"p": np.array([1.0, np.nan, 0.0])}, AdamState())


def test_clip_under_threshold_unchanged():
    g = {"a": np.array([4.0, 0.0])}
    out = clip_by_batch_norm(g, 16)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_over_threshold_rescales_to_batch_size():
    g = {"a": np.array([24.0, 0.0]), "b": np.array([[32.0]])}
    assert global_norm(g) == pytest.approx(40.0)
    out = clip_by_batch_norm(g, 16)
    assert global_norm(out) == pytest.approx(16.0)
    np.testing.assert_allclose(out["a"], g["a"] * 16 / 40)


def test_clip_zero_gradients_pass():
    out = clip_by_batch_norm({"a": np.zeros(3)}, 4)
    np.testing.assert_array_equal(out["a"], np.zeros(3))


def test_clip_rejects_bad_batch_size():
    with pytest.raises(ValueError):
        clip_by_batch_norm({"a": np.ones(2)}, 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-100, 100)), st.integers(1, 32),
       st.floats(0.1, 4.0))
def test_clip_is_idempotent(vec, batch, ratio):
    once = clip_by_batch_norm({"g": vec}, batch, ratio)
    twice = clip_by_batch_norm(once, batch, ratio)
    np.testing.assert_allclose(twice["g"], once["g"], rtol=1e-12, atol=0)
    assert global_norm(once) <= ratio * batch * (1 + 1e-12)
