import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attnloc.errors import InvalidInputError
from attnloc.pwsoftmax import (CLAMPED_HIGH, CLAMPED_LOW, LINEAR, linear_argument, piecewise_softmax,
                               piecewise_softmax_batched, softmax, taylor_coeffs)
from oracles import gamma_vector, linear_args_loop, softmax_mp


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(4)), 0.25)
    assert np.allclose(softmax([np.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    w = np.zeros(10)
    w[3] = 50
    assert softmax(w)[3] >= 1 - 1e-15


def test_softmax_nan_rejected():
    with pytest.raises(InvalidInputError):
        softmax([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        piecewise_softmax(np.array([np.nan, 1.0]))


def test_softmax_overflow_safe():
    out = softmax([1000.0, 999.0])
    assert np.all(np.isfinite(out)) and np.allclose(out, softmax_mp([1.0, 0.0]))


def test_taylor_coeff_examples():
    c = taylor_coeffs(2, 1)
    assert np.allclose(c.gamma, [0.25, -0.25]) and c.gamma0 == 0.5
    c = taylor_coeffs(4, 2)
    assert np.allclose(c.gamma, [-1 / 16, 3 / 16, -1 / 16, -1 / 16]) and c.gamma0 == 0.25
    with pytest.raises(IndexError):
        taylor_coeffs(4, 5)
    with pytest.raises(IndexError):
        taylor_coeffs(4, 0)


@pytest.mark.parametrize("T", [1, 2, 7, 64])
def test_taylor_matches_numerical_softmax_gradient(T):
    for i in range(1, T + 1):
        c = taylor_coeffs(T, i)
        assert np.allclose(c.gamma, gamma_vector(T, i), atol=1e-15)
        assert abs(c.gamma.sum()) < 1e-15
        h = 1e-6
        num = [(softmax(h * e)[i - 1] - softmax(-h * e)[i - 1]) / (2 * h) for e in np.eye(T)]
        assert np.allclose(c.gamma, num, atol=1e-9)


def test_piecewise_examples():
    v, pc = piecewise_softmax(np.zeros(5))
    assert np.allclose(v, 0.2) and np.all(pc.region == LINEAR)
    v, pc = piecewise_softmax(np.array([10.0, 0.0]))
    assert np.allclose(v, [1, 0]) and list(pc.region) == [CLAMPED_HIGH, CLAMPED_LOW]
    v, pc = piecewise_softmax(np.array([0.4, -0.4]))
    assert np.allclose(v, [0.7, 0.3], atol=1e-15) and np.all(pc.region == LINEAR)


def test_boundary_counts_as_linear():
    # T=2, omega=(2,0): z_1 = (2-1)/2 + 1/2 = 1 exactly
    v, pc = piecewise_softmax(np.array([2.0, 0.0]))
    assert v[0] == 1.0 and pc.region[0] == LINEAR


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)))
def test_piecewise_matches_loop_oracle(w):
    v, pc = piecewise_softmax(w)
    z = linear_args_loop(w)
    assert np.allclose(v, np.clip(z, 0, 1), atol=1e-12)
    # clamped columns vanish, linear ones equal gamma^i
    for i in range(len(w)):
        if pc.region[i] == LINEAR:
            assert np.allclose(pc.Gamma[:, i], gamma_vector(len(w), i + 1))
            assert pc.gamma0_tilde[i] == 1 / len(w)
        else:
            assert not pc.Gamma[:, i].any()
            assert pc.gamma0_tilde[i] == (1.0 if pc.region[i] == CLAMPED_HIGH else 0.0)
    assert np.allclose(pc.Gamma.T @ w + pc.gamma0_tilde, v, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-0.01, 0.01)))
def test_near_origin_agreement_and_sum(w):
    v, pc = piecewise_softmax(w)
    assert np.all(pc.region == LINEAR)
    assert abs(v.sum() - 1) < 1e-12
    assert np.max(np.abs(softmax(w) - v)) <= 10 * np.max(np.abs(w)) ** 2 + 1e-15


def test_selector_behaviour_for_large_T():
    for T in (10, 1000, 100000):
        g = taylor_coeffs(T, 1).gamma * T
        assert abs(g[0] - (1 - 1 / T)) < 1e-12 and abs(g[1] + 1 / T) < 1e-12


def test_batched_agrees_with_single():
    rng = np.random.default_rng(1)
    W = rng.normal(scale=5, size=(3, 9))
    vals, mask = piecewise_softmax_batched(W, axis=1)
    for row, vrow, mrow in zip(W, vals, mask):
        v, pc = piecewise_softmax(row)
        assert np.allclose(v, vrow) and np.array_equal(mrow, pc.region == LINEAR)
    assert np.allclose(linear_argument(W.T, axis=0), linear_argument(W, axis=1).T)
