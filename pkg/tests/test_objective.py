import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posmlm.codec import DomainError
from posmlm.objective import (
    entropy, gmlm_loss, loss_gradient_wrt_logits, position_loss, position_softmax, soft_cross_entropy,
    soft_label_matrix, soft_labels, softmax, text_loss,
)


def oracle_soft_labels(p_star, M, alpha):
    w = [math.exp(-alpha * abs(i - p_star)) for i in range(M)]
    s = math.fsum(w)
    return [x / s for x in w]


@pytest.mark.parametrize("p_star,M,alpha", [(0, 16, 0.25), (7, 16, 1.0), (511, 512, 0.25), (300, 512, 0.1)])
def test_soft_labels_match_loop_oracle(p_star, M, alpha):
    got = soft_labels(p_star, M, alpha).probs
    np.testing.assert_allclose(got, oracle_soft_labels(p_star, M, alpha), rtol=1e-12, atol=1e-300)


def test_unnormalized_decay_at_distance_four():
    t = soft_labels(100, 512, 0.25)
    assert t.probs[104] / t.probs[100] == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert math.exp(-1.0) == pytest.approx(0.367879, abs=1e-6)


def test_sharp_alpha_is_nearly_one_hot():
    # normalizer 1 + 2 e^-10 / (1 - e^-10) evaluated by hand: peak 0.999909...
    peak = soft_labels(256, 512, 10.0).probs[256]
    assert peak > 0.9999
    assert peak == pytest.approx(1 / (1 + 2 * math.exp(-10) / (1 - math.exp(-10))), rel=1e-12)


def test_soft_labels_reject_bad_alpha_and_bin():
    with pytest.raises(DomainError):
        soft_labels(0, 16, 0.0)
    with pytest.raises(DomainError):
        soft_labels(16, 16, 0.25)


def test_one_hot_mode():
    y = soft_label_matrix([3, 0], 5, None)
    assert y.tolist() == [[0, 0, 0, 1, 0], [1, 0, 0, 0, 0]]


@settings(max_examples=200)
@given(st.integers(2, 64), st.data(), st.floats(0.01, 20))
def test_soft_label_invariants(M, data, alpha):
    p = data.draw(st.integers(0, M - 1))
    y = soft_labels(p, M, alpha).probs
    assert abs(y.sum() - 1) <= 1e-9
    if alpha * (M - 1) < 700:  # beyond this e^-alpha*d underflows in double precision
        assert (y > 0).all()
    assert int(np.argmax(y)) == p
    d = np.abs(np.arange(M) - p)
    order = np.argsort(d, kind="stable")
    assert (np.diff(y[order]) <= 1e-15).all()
    for k in range(1, min(p, M - 1 - p) + 1):  # symmetric where both sides exist
        assert y[p - k] == pytest.approx(y[p + k], rel=1e-12)


def test_position_softmax_examples():
    emb = np.eye(3)
    np.testing.assert_allclose(position_softmax(np.array([1.0, 0.0, 0.0]), emb), [0.576117, 0.211942, 0.211942],
                               atol=1e-6)
    np.testing.assert_allclose(position_softmax(np.zeros(3), emb), [1 / 3] * 3)
    h = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax(h + 5.0), softmax(h), rtol=1e-12)
    with pytest.raises(DomainError):
        position_softmax(np.zeros(4), emb)


def test_position_loss_uniform_is_log_m():
    for alpha in (0.1, 0.25, 1.0):
        assert position_loss(np.full(512, 1 / 512), soft_labels(17, 512, alpha)) == pytest.approx(math.log(512),
                                                                                                  abs=1e-9)
    assert math.log(512) == pytest.approx(6.238325, abs=1e-6)


def test_position_loss_at_target_is_entropy_and_bounds_below():
    t = soft_labels(5, 16, 0.25)
    assert position_loss(t.probs, t) == pytest.approx(entropy(t.probs), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.dirichlet(np.ones(16))
        assert position_loss(q, t) >= entropy(t.probs) - 1e-12


def test_position_loss_one_hot_limit_is_nll():
    rng = np.random.default_rng(1)
    q = rng.dirichlet(np.ones(32))
    assert position_loss(q, soft_labels(9, 32, 50.0)) == pytest.approx(-math.log(q[9]), rel=1e-12)


def test_position_loss_zero_probability_is_finite():
    q = np.zeros(8)
    q[0] = 1.0
    assert math.isfinite(position_loss(q, soft_labels(7, 8, 0.25)))


def test_text_loss_examples():
    assert text_loss(np.full(10, 0.1), 3) == pytest.approx(math.log(10))
    assert text_loss(np.eye(4)[2], 2) == 0.0
    assert text_loss(np.array([0.25, 0.75]), 0) == pytest.approx(1.386294, abs=1e-6)


def test_gmlm_loss_composition():
    assert gmlm_loss(1.0, 1.0, 2.0).combined == 3.0
    assert gmlm_loss(0.0, 0.7).combined == 0.7
    assert gmlm_loss(6.238325, 0.0, 2.0).combined == pytest.approx(12.476650, abs=1e-12)
    b = gmlm_loss(0.4, 1.3, 2.0)
    assert b.combined == 2.0 * b.position_loss + b.text_loss and b.lam == 2.0


def test_gradient_at_optimum_and_sums_to_zero():
    t = soft_labels(3, 8, 0.5)
    g = loss_gradient_wrt_logits(np.log(t.probs) + 4.2, t)
    assert np.abs(g).max() < 1e-12
    rng = np.random.default_rng(2)
    g = loss_gradient_wrt_logits(rng.normal(size=8), t)
    assert abs(g.sum()) < 1e-12


def _fd_grad(logits, y, h=1e-5):
    g = np.zeros_like(logits)
    for i in range(len(logits)):
        e = np.zeros_like(logits)
        e[i] = h
        g[i] = (soft_cross_entropy(logits + e, y) - soft_cross_entropy(logits - e, y)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(100):
        M = int(rng.integers(2, 33))
        t = soft_labels(int(rng.integers(0, M)), M, float(rng.uniform(0.05, 3)))
        logits = rng.normal(scale=2, size=M)
        np.testing.assert_allclose(loss_gradient_wrt_logits(logits, t), _fd_grad(logits, t.probs), atol=1e-5)
