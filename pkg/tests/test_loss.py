import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groqloco.errors import DimensionError, EmptyWindowError, ValidationError
from groqloco.loss import (
    adaptive_term, adaptive_term_value, log_sigma_gradient, masked_sequence_loss,
    stationary_log_sigma,
)
from groqloco.numerics import Tape, Tensor


def _grads(pred, target, log_sigma, delta=0.5):
    p, s = Tensor(pred, requires_grad=True), Tensor(log_sigma, requires_grad=True)
    with Tape() as tape:
        out = adaptive_term(p, target, s, delta)
    tape.backward(out)
    return out.item(), p.grad, s.grad


def test_zero_residual_zero_log_sigma():
    assert adaptive_term(np.zeros(4), np.zeros(4), np.zeros(4)).item() == 0.0


def test_hand_values():
    value, _, g_sigma = _grads(np.array([0.5]), np.array([0.0]), np.array([0.0]))
    assert value == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert round(value, 6) == 0.173287
    assert g_sigma[0] == pytest.approx(1 - 0.25 * math.log(2), abs=1e-15)
    assert round(g_sigma[0], 6) == 0.826713


def test_random_pairs_match_closed_forms():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r, s, delta = rng.normal() * 2, rng.normal(), 0.5
        value, g_pred, g_sigma = _grads(np.array([r]), np.array([0.0]), np.array([s]), delta)
        expected = math.exp(-s) * delta ** 2 * math.log(1 + (r / delta) ** 2) + s
        assert abs(value - expected) < 1e-10
        assert abs(g_sigma[0] - (1 - (expected - s))) < 1e-10
        assert abs(g_pred[0] - math.exp(-s) * 2 * r / (1 + (r / delta) ** 2)) < 1e-10


def test_vector_gradients_average_over_dims(rng):
    r, s = rng.normal(size=5), rng.normal(size=5)
    value, _, g_sigma = _grads(r, np.zeros(5), s)
    assert value == pytest.approx(adaptive_term_value(r, s), abs=1e-14)
    np.testing.assert_allclose(g_sigma, log_sigma_gradient(r, s), atol=1e-14)
    s_star = stationary_log_sigma(r)
    np.testing.assert_allclose(log_sigma_gradient(r, s_star), 0.0, atol=1e-14)


def test_width_and_delta_errors():
    with pytest.raises(DimensionError):
        adaptive_term(np.zeros(3), np.zeros(3), np.zeros(2))
    with pytest.raises(DimensionError):
        adaptive_term(np.zeros(3), np.zeros(4), np.zeros(3))
    with pytest.raises(ValidationError):
        adaptive_term(np.zeros(3), np.zeros(3), np.zeros(3), delta=0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-5, 5))
def test_robust_term_bounded_growth(r, s):
    # the residual term grows logarithmically, never faster than the squared error
    term = adaptive_term_value(np.array([r]), np.array([s])) - s
    assert 0.0 <= term <= math.exp(-s) * r * r + 1e-12


def test_mask_all_ones_is_plain_mean(rng):
    pred, target, s = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=3)
    loss = masked_sequence_loss(pred, target, np.ones(6), s).item()
    assert loss == pytest.approx(adaptive_term_value(pred - target, s).mean(), abs=1e-14)


def test_mask_selecting_one_step(rng):
    pred, target, s = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=3)
    mask = np.zeros(6)
    mask[2] = 1
    loss = masked_sequence_loss(pred, target, mask, s).item()
    assert loss == pytest.approx(adaptive_term_value(pred[2] - target[2], s), abs=1e-14)


def test_lengths_five_and_three(rng):
    s = rng.normal(size=2)
    a_pred, a_tgt = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    b_pred, b_tgt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    pred = np.zeros((2, 5, 2))
    tgt = np.zeros((2, 5, 2))
    pred[0], tgt[0] = a_pred, a_tgt
    pred[1, :3], tgt[1, :3] = b_pred, b_tgt
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], float)
    terms = [adaptive_term_value(a_pred[t] - a_tgt[t], s) for t in range(5)]
    terms += [adaptive_term_value(b_pred[t] - b_tgt[t], s) for t in range(3)]
    expected = sum(terms) / 8
    assert masked_sequence_loss(pred, tgt, mask, s).item() == pytest.approx(expected, abs=1e-14)


def test_empty_mask_rejected():
    with pytest.raises(EmptyWindowError):
        masked_sequence_loss(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), np.zeros((2, 3)), np.zeros(1))


def test_padding_is_bitwise_invariant(rng):
    pred, target, s = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3)), rng.normal(size=3)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], float)

    def run(extra):
        p = Tensor(np.concatenate([pred, rng.normal(size=(2, extra, 3))], 1), requires_grad=True)
        t = np.concatenate([target, rng.normal(size=(2, extra, 3))], 1)
        m = np.concatenate([mask, np.zeros((2, extra))], 1)
        sig = Tensor(s, requires_grad=True)
        with Tape() as tape:
            loss = masked_sequence_loss(p, t, m, sig)
        tape.backward(loss)
        return loss.item(), p.grad[:, :4], sig.grad

    base = run(0)
    for extra in (1, 7):
        other = run(extra)
        assert other[0] == base[0]
        np.testing.assert_array_equal(other[1], base[1])
        np.testing.assert_array_equal(other[2], base[2])
