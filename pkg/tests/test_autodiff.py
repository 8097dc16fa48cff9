import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamdiff import autodiff as ad
from streamdiff.autodiff import Tape, Tensor, finite_diff_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def fd_unary(op, x, h=1e-6):
    """Gradient of sum(op(x) * w) by central differences, w fixed."""
    w = np.random.default_rng(1).standard_normal(op(Tensor(x)).shape)
    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[ix] += h
        xm[ix] -= h
        g[ix] = ((op(Tensor(xp)).data * w).sum() - (op(Tensor(xm)).data * w).sum()) / (2 * h)
    return w, g


def tape_unary(op, x, w):
    t = Tensor(x)
    with Tape() as tape:
        tape.watch(t)
        y = op(t)
    return tape.gradient(y, [t], cotangent=w)[0]


UNARY = {
    "exp": lambda t: ad.exp(t / 5.0),
    "tanh": ad.tanh,
    "square": ad.square,
    "gelu": ad.gelu,
    "layer_norm": ad.layer_norm,
    "softmax": ad.masked_softmax,
    "sum_axis": lambda t: ad.tsum(t, axis=0),
    "mean_keep": lambda t: ad.mean(t, axis=1, keepdims=True),
    "transpose": lambda t: t.transpose(1, 0),
    "reshape": lambda t: t.reshape(-1),
    "getitem": lambda t: t[np.array([0, 0, 1])],
    "log": lambda t: ad.log(ad.square(t) + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_unary_vjp_matches_central_differences(name, x):
    op = UNARY[name]
    w, fd = fd_unary(op, x)
    g = tape_unary(op, x, w)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, (2, 3, 4), elements=finite), b=arrays(np.float64, (4, 5), elements=finite))
def test_binary_vjps(a, b):
    ta, tb = Tensor(a), Tensor(b)
    for f in (
        lambda x, y: x @ y,
        lambda x, y: x[..., :1] * y[:1, :4] + x - y[0, :4],
        lambda x, y: ad.concat([x, ad.transpose(y[:3], (0, 1)).reshape(1, 3, 5)[..., :4]], axis=0),
    ):
        def loss(_):
            return ad.tsum(ad.square(f(ta, tb)) * 0.01)

        assert finite_diff_check(loss, [ta, tb], h=1e-5) <= 1e-6


def test_finite_diff_examples():
    x = Tensor(np.array(3.0))
    err = finite_diff_check(lambda p: ad.square(p), x, h=1e-5)
    assert err <= 1e-9
    rng = np.random.default_rng(0)
    w = rng.standard_normal(5)
    x = Tensor(rng.standard_normal((1, 5)))
    assert finite_diff_check(lambda p: ad.tsum(ad.softmax_rows(p) * w), x, h=1e-5) <= 1e-6


def test_finite_diff_rejects_bad_step_and_nonfinite():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: ad.tsum(p), x, h=1e-3)
    with pytest.raises((ValueError, FloatingPointError)):
        finite_diff_check(lambda p: ad.tsum(p) * np.inf, x)


def test_softmax_spot_values():
    np.testing.assert_allclose(ad.softmax_rows(np.array([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(ad.softmax_rows(np.array([[1000.0, 1000.0, 1000.0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(ad.softmax_rows(np.array([[0.0, -1.0, -2.0]])).data, [[0.66524, 0.24473, 0.09003]], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), shift=st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(x, shift):
    y = ad.softmax_rows(x).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_rows(x + shift).data, y, atol=1e-12)


def test_softmax_rows_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.softmax_rows(np.array([[0.0, np.nan]]))


def test_masked_softmax_gives_exact_zeros():
    x = np.random.default_rng(0).standard_normal((4, 5))
    mask = np.tril(np.ones((4, 5), dtype=bool))
    y = ad.masked_softmax(x, mask).data
    assert (y[~mask] == 0.0).all()
    np.testing.assert_allclose(y.sum(1), 1.0, atol=1e-12)


def test_gradient_accumulates_for_reused_leaf():
    x = Tensor(np.array([2.0, -1.0]))
    with Tape() as tape:
        tape.watch(x)
        y = ad.tsum(x * x + x)
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_unwatched_sources_get_zero_gradient_and_no_grad_stops_recording():
    x, z = Tensor(np.ones(3)), Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        with ad.no_grad():
            c = x * 2.0
        y = ad.tsum(x * 3.0 + c)
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_allclose(gx, 3.0)
    np.testing.assert_allclose(gz, 0.0)


def test_non_finite_outputs_are_rejected():
    with pytest.raises(FloatingPointError):
        ad.exp(Tensor(np.array([1000.0])))
