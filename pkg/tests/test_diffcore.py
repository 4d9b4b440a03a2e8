import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ric_lab import diffcore as dc
from ric_lab import special


def leaf(x):
    return dc.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_softmax_of_zeros_is_uniform():
    out = dc.softmax(dc.Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_lgamma_and_digamma_reference_values():
    assert dc.lgamma(dc.Tensor(3.0)).item() == pytest.approx(0.6931471805599453, abs=1e-14)
    assert dc.digamma(dc.Tensor(1.0)).item() == pytest.approx(-0.5772156649015329, abs=1e-14)


@pytest.mark.parametrize("x", [0.01, 0.3, 0.5, 1.0, 2.5, 7.0, 10.0, 33.3, 1e3])
def test_special_functions_match_mpmath(x):
    assert special.lgamma(x) == pytest.approx(float(mpmath.loggamma(x)), rel=1e-13, abs=1e-14)
    assert special.digamma(x) == pytest.approx(float(mpmath.digamma(x)), rel=1e-13, abs=1e-14)
    assert special.trigamma(x) == pytest.approx(float(mpmath.psi(1, x)), rel=1e-12)


@pytest.mark.parametrize("x", [0.5, 1.0, 2.5, 10.0])
def test_digamma_recurrence(x):
    assert special.digamma(x + 1) == pytest.approx(special.digamma(x) + 1 / x, abs=1e-10)


def test_trigamma_rejects_nonpositive():
    with pytest.raises(ValueError):
        special.trigamma(0.0)


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    g = dc.backward(dc.sum(x))
    np.testing.assert_array_equal(g[x], np.ones((2, 3)))


def test_log_softmax_gradient_is_onehot_minus_softmax():
    z = leaf([1.0, 2.0, 3.0])
    g = dc.backward(dc.log(dc.softmax(z))[2])[z]
    expected = np.eye(3)[2] - np.exp([1, 2, 3]) / np.exp([1, 2, 3]).sum()
    np.testing.assert_allclose(g, expected, atol=1e-12)
    assert dc.gradient_check(lambda t: dc.log(dc.softmax(t))[2], z) < 1e-6


def test_constant_root_gives_empty_map():
    assert dc.backward(dc.Tensor(3.0)) == {}
    assert dc.backward(dc.sum(dc.Tensor(np.ones(3)))) == {}


def test_non_scalar_root_rejected():
    with pytest.raises(dc.ShapeError):
        dc.backward(leaf([1.0, 2.0]) * 2.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(dc.ShapeError) as info:
        dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))
    msg = str(info.value)
    assert "add" in msg and "(3,)" in msg and "(4,)" in msg
    with pytest.raises(dc.ShapeError):
        dc.matvec(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones(4)))


def test_repeated_backward_is_identical():
    x = leaf(np.linspace(-1, 1, 5))
    root = dc.sum(dc.tanh(x) * dc.exp(x))
    a = dc.backward(root)[x]
    b = dc.backward(root)[x]
    assert np.array_equal(a, b)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with dc.no_grad():
        y = dc.sum(x * x)
    assert y.node is None
    assert dc.backward(y) == {}


def test_gradient_check_examples():
    assert dc.gradient_check(lambda t: dc.sum(dc.square(t)), leaf([1.0, 2.0])) < 1e-6
    assert dc.gradient_check(lambda t: dc.Tensor(4.0) + 0.0 * dc.sum(t), leaf([1.0, 2.0])) == 0.0


def test_gradient_check_reports_nonfinite_coordinate():
    with pytest.raises(dc.NonFiniteError, match="coordinate"), np.errstate(invalid="ignore"):
        dc.gradient_check(lambda t: dc.sum(dc.log(t)), leaf([1e-6, 1.0]), step=1e-5)


def test_gru_cell_norm_gradient():
    rng = np.random.default_rng(3)
    h, d = 4, 3
    wx = rng.normal(size=(3 * h, d))
    wh = leaf(rng.normal(size=(3 * h, h)))
    x = rng.normal(size=d)
    tau = rng.normal(size=h)

    def cell(w):
        gx = dc.matvec(dc.Tensor(wx), dc.Tensor(x))
        gh = dc.matvec(w, dc.Tensor(tau))
        z = dc.sigmoid(gx[:h] + gh[:h])
        r = dc.sigmoid(gx[h:2 * h] + gh[h:2 * h])
        n = dc.tanh(gx[2 * h:] + r * gh[2 * h:])
        out = n + z * (dc.Tensor(tau) - n)
        # Euclidean norm written with the available primitives
        return dc.exp(0.5 * dc.log(dc.sum(dc.square(out))))

    assert dc.gradient_check(cell, wh, step=1e-3, order=4) < 1e-5


def test_fourth_order_stencil_on_cubic():
    # the five-point stencil is exact for polynomials up to degree four
    x = leaf([0.3, -1.7, 2.2])
    assert dc.gradient_check(lambda t: dc.sum(t * t * t), x, step=0.1, order=4) < 1e-12


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_is_a_distribution(z):
    p = dc.softmax(dc.Tensor(np.array(z))).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_elementwise_primitives_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=4))
    pos = leaf(rng.uniform(0.5, 3.0, size=4))
    w = rng.normal(size=4)
    for f, arg in [(dc.sigmoid, x), (dc.tanh, x), (dc.silu, x), (dc.exp, x),
                   (dc.log, pos), (dc.lgamma, pos), (dc.digamma, pos)]:
        err = dc.gradient_check(lambda t: dc.sum(f(t) * w), arg)
        assert err < 1e-5, f.__name__


def test_relu_maximum_away_from_kinks():
    x = leaf([-1.3, -0.2, 0.4, 2.0])
    assert dc.gradient_check(lambda t: dc.sum(dc.relu(t) * t), x) < 1e-6
    y = dc.Tensor(np.array([0.0, 0.0, 1.0, 1.0]))
    assert dc.gradient_check(lambda t: dc.sum(dc.maximum(t, y) * t), x) < 1e-6


def test_broadcast_gradient_is_reduced():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.arange(4.0))
    g = dc.backward(dc.sum(a * b))
    np.testing.assert_array_equal(g[b], np.full(4, 3.0))
    assert g[a].shape == (3, 4)


def test_digamma_of_large_and_small_arguments_finite():
    xs = np.array([1e-8, 1e-3, 1e6])
    out = special.digamma(xs)
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(float(mpmath.digamma(1e-8)), rel=1e-12)
    assert special.lgamma(1e6) == pytest.approx(float(mpmath.loggamma(1e6)), rel=1e-14)
    assert math.isfinite(special.lgamma(1e-300))
