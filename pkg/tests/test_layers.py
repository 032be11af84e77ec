import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ceemkit import layers as L
from ceemkit.errors import ShapeError
from ceemkit.tensor import windows
from oracles import (PUBLISHED_MAX, PUBLISHED_TWOMAXMIN, RAMP_PATCH, central_difference,
                     conv_naive, depthwise_naive, pool_naive)

POOL32 = {k: L.PoolSpec(k, (3, 3), 2) for k in ("max", "maxmin", "twomaxmin")}


def ramp():
    return RAMP_PATCH[None, :, :, None].astype(float)


# --------------------------------------------------------------------- params

@pytest.mark.parametrize("p0,p1,k,expected", [(3, 32, 3, 896), (1, 1, 3, 10), (64, 224, 3, 129248)])
def test_conv_param_count(p0, p1, k, expected):
    assert L.conv2d_param_count(p0, p1, k) == expected
    assert L.Conv2DSpec(p0, p1, k).param_count() == expected


def test_dwsc_counts():
    assert L.dwsc_param_count_paper(64) == 640
    assert L.dwsc_param_count_true(64, 64) == 4800
    spec = L.DWSConv2DSpec(64, 64)
    assert spec.param_count() == 4800
    # the simplified count is exactly the depthwise kernel plus its bias
    assert spec.depthwise.size + spec.depthwise_bias.size == L.dwsc_param_count_paper(64)


@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([1, 3, 5]))
def test_conv_param_count_matches_enumeration(p0, p1, k):
    spec = L.Conv2DSpec(p0, p1, k)
    enumerated = sum(1 for _ in np.nditer(spec.weights)) + sum(1 for _ in np.nditer(spec.bias))
    assert L.conv2d_param_count(p0, p1, k) == enumerated


# ----------------------------------------------------------------------- conv

def test_conv_identity_kernel():
    spec = L.Conv2DSpec(1, 1, 3, activation="none")
    spec.weights[1, 1, 0, 0] = 1.0
    out, _ = L.conv2d_forward(np.full((1, 1, 1, 1), 4.25), spec)
    assert out.item() == 4.25


@pytest.mark.parametrize("beta", [0.7, -0.7])
def test_conv_bias_only(beta):
    spec = L.Conv2DSpec(2, 3, 3)
    spec.bias[:] = beta
    out, _ = L.conv2d_forward(np.random.default_rng(0).normal(size=(1, 4, 4, 2)), spec)
    assert np.all(out == max(beta, 0.0))


@pytest.mark.parametrize("k", [3, 5])
def test_conv_matches_direct_oracle(rng, k):
    x = rng.normal(size=(1, 5, 5, 2))
    spec = L.Conv2DSpec(2, 3, k, activation="none", weights=rng.normal(size=(k, k, 2, 3)),
                        bias=rng.normal(size=3))
    out, _ = L.conv2d_forward(x, spec)
    np.testing.assert_allclose(out, conv_naive(x, spec.weights, spec.bias), atol=1e-12, rtol=0)
    spec.activation = "relu"
    out, _ = L.conv2d_forward(x, spec)
    np.testing.assert_allclose(out, conv_naive(x, spec.weights, spec.bias, "relu"), atol=1e-12, rtol=0)
    assert out.shape == (1, 5, 5, 3)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 4, 4, 3)), L.Conv2DSpec(2, 3))


# ----------------------------------------------------------------------- dwsc

def test_dwsc_identity_is_relu(rng):
    spec = L.DWSConv2DSpec(3, 3)
    spec.depthwise[1, 1, :] = 1.0
    spec.pointwise[0, 0] = np.eye(3)
    x = rng.normal(size=(2, 4, 5, 3))
    out, _ = L.dwsc_forward(x, spec)
    assert np.array_equal(out, np.maximum(x, 0))


def test_dwsc_matches_two_stage_oracle(rng):
    x = rng.normal(size=(2, 5, 4, 2))
    spec = L.DWSConv2DSpec(2, 3, depthwise=rng.normal(size=(3, 3, 2)),
                           depthwise_bias=rng.normal(size=2),
                           pointwise=rng.normal(size=(1, 1, 2, 3)),
                           pointwise_bias=rng.normal(size=3))
    d = depthwise_naive(x, spec.depthwise, spec.depthwise_bias)
    expected = np.zeros((2, 5, 4, 3))
    for idx in np.ndindex(2, 5, 4):
        for f in range(3):
            expected[idx + (f,)] = sum(d[idx + (c,)] * spec.pointwise[0, 0, c, f] for c in range(2)) \
                + spec.pointwise_bias[f]
    out, _ = L.dwsc_forward(x, spec)
    np.testing.assert_allclose(out, np.maximum(expected, 0), atol=1e-12, rtol=0)
    assert out.shape[-1] == 3


# -------------------------------------------------------------------- pooling

def test_worked_example_first_element():
    out, _ = L.pool_forward(ramp(), POOL32["twomaxmin"])
    assert out[0, 0, 0, 0] == 2 * 119 - 109 == 129


def test_worked_example_full_matrices():
    x = ramp()
    for kind in POOL32:
        out, _ = L.pool_forward(x, POOL32[kind])
        assert np.array_equal(out[0, :, :, 0], pool_naive(RAMP_PATCH[None, :, :, None], kind)[0, :, :, 0])
    two, _ = L.pool_forward(x, POOL32["twomaxmin"])
    mx, _ = L.pool_forward(x, POOL32["max"])
    assert two[0, :, :, 0].tolist() == [[129, 130, 191], [169, 167, 202], [198, 191, 187]]
    assert mx[0, :, :, 0].tolist() == [[119, 120, 151], [143, 142, 161], [170, 165, 163]]
    # printed matrices are wrong where a window reaches 151 / 161 or holds a lower min
    assert set(zip(*np.nonzero(two[0, :, :, 0] != PUBLISHED_TWOMAXMIN))) == {(0, 2), (1, 1), (1, 2), (2, 1)}
    assert set(zip(*np.nonzero(mx[0, :, :, 0] != PUBLISHED_MAX))) == {(0, 2), (1, 2)}


def test_worked_example_deviation_reading():
    w = next(windows(RAMP_PATCH.astype(float), (3, 3), 2))
    assert w.mode() == 111 and w.max == 119
    up, down = w.deviations()
    assert (up, down) == (8, 2)
    assert w.max + up + down == 129


def test_constant_plane_twomaxmin():
    out, _ = L.pool_forward(np.full((1, 7, 7, 1), 5.0), POOL32["twomaxmin"])
    assert out.shape == (1, 3, 3, 1) and np.all(out == 5.0)


def test_pool_too_small():
    with pytest.raises(ShapeError):
        L.pool_forward(np.zeros((1, 2, 5, 1)), POOL32["max"])


small_batches = st.tuples(st.integers(1, 2), st.integers(3, 9), st.integers(3, 9), st.integers(1, 3))


@given(arrays(np.int64, small_batches, elements=st.integers(-300, 300)),
       st.sampled_from([(3, 3), (2, 2), (3, 2)]), st.integers(1, 3))
def test_pool_equals_naive_on_integers(x, pool, stride):
    x = x.astype(float)
    for kind in POOL32:
        out, _ = L.pool_forward(x, L.PoolSpec(kind, pool, stride))
        assert np.array_equal(out, pool_naive(x, kind, pool, stride))


@given(arrays(np.float64, small_batches, elements=st.floats(-1e3, 1e3)))
def test_decomposition_and_edge_amplification(x):
    two, _ = L.pool_forward(x, POOL32["twomaxmin"])
    mx, _ = L.pool_forward(x, POOL32["max"])
    mm, _ = L.pool_forward(x, POOL32["maxmin"])
    assert np.array_equal(two, mx + mm)
    assert np.all(mm >= 0)
    for b in range(x.shape[0]):
        for c in range(x.shape[3]):
            for w, gap in zip(windows(x[b, :, :, c], (3, 3), 2), (two - mx)[b, :, :, c].ravel()):
                up, down = w.deviations()
                assert gap == pytest.approx(up + down, abs=1e-9)
                assert (gap > 0) == (w.max != w.min)


@given(arrays(np.int64, small_batches, elements=st.integers(-100, 100)), st.integers(-50, 50))
def test_monotone_shift(x, c):
    x = x.astype(float)
    for kind in ("max", "twomaxmin"):
        a, _ = L.pool_forward(x, POOL32[kind])
        b, _ = L.pool_forward(x + c, POOL32[kind])
        assert np.array_equal(b, a + c)


def test_pool_backward_single_window():
    x = np.array([[4., 1., 7.], [3., 9., 2.], [0.5, 6., 5.]])[None, :, :, None]
    out, cache = L.pool_forward(x, POOL32["twomaxmin"])
    dx = L.pool_backward(np.ones_like(out), POOL32["twomaxmin"], cache)
    expected = np.zeros((3, 3))
    expected[1, 1] = 2.0
    expected[2, 0] = -1.0
    assert np.array_equal(dx[0, :, :, 0], expected)


def test_pool_backward_ties_first_occurrence():
    x = np.array([[1., 3., 3.], [0., 3., 0.], [2., 2., 2.]])[None, :, :, None]
    _, cache = L.pool_forward(x, POOL32["maxmin"])
    dx = L.pool_backward(np.ones((1, 1, 1, 1)), POOL32["maxmin"], cache)
    assert dx[0, 0, 1, 0] == 1.0 and dx[0, 1, 0, 0] == -1.0
    assert np.count_nonzero(dx) == 2


def test_pool_backward_mass(rng):
    x = rng.normal(size=(2, 9, 9, 3))
    g = rng.normal(size=(2, 4, 4, 3))
    for kind, factor in (("max", 1), ("maxmin", 0), ("twomaxmin", 1)):
        _, cache = L.pool_forward(x, POOL32[kind])
        dx = L.pool_backward(g, POOL32[kind], cache)
        assert dx.sum() == pytest.approx(factor * g.sum(), abs=1e-12)


def test_pool_backward_shape_mismatch(rng):
    _, cache = L.pool_forward(rng.normal(size=(1, 7, 7, 1)), POOL32["max"])
    with pytest.raises(ShapeError):
        L.pool_backward(np.ones((1, 2, 2, 1)), POOL32["max"], cache)


def _separated_input(rng, shape, margin=1e-2):
    # distinct values on a grid keep every window's argmax/argmin unique with margin
    n = int(np.prod(shape))
    return (rng.permutation(n) * margin).reshape(shape).astype(float)


@pytest.mark.parametrize("kind", ["max", "maxmin", "twomaxmin"])
def test_pool_backward_finite_differences(rng, kind):
    x = _separated_input(rng, (1, 7, 7, 1))
    g = rng.normal(size=(1, 3, 3, 1))
    spec = POOL32[kind]
    _, cache = L.pool_forward(x, spec)
    analytic = L.pool_backward(g, spec, cache)
    numeric = central_difference(lambda: float((L.pool_forward(x, spec)[0] * g).sum()), x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


# ------------------------------------------------------------------- negative

def test_negative():
    assert L.negative_forward(np.zeros(1))[0] == 255.0
    assert L.negative_forward(np.zeros(1), L.NegativeSpec(1.0))[0] == 1.0


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)))
def test_negative_involution(x):
    assert np.array_equal(L.negative_forward(L.negative_forward(x)), x) or \
        np.allclose(L.negative_forward(L.negative_forward(x)), x, rtol=0, atol=1e-9)


@settings(max_examples=100)
@given(arrays(np.int64, (2, 3, 3, 2), elements=st.integers(0, 255)))
def test_negative_involution_exact_on_integers(x):
    x = x.astype(float)
    assert np.array_equal(L.negative_forward(L.negative_forward(x)), x)


def test_negative_slope(rng):
    x = rng.normal(size=(1, 3, 3, 2))
    g = rng.normal(size=x.shape)
    numeric = central_difference(lambda: float((L.negative_forward(x) * g).sum()), x)
    np.testing.assert_allclose(numeric, L.negative_backward(g), rtol=1e-6, atol=1e-9)
    ones = central_difference(lambda: float(L.negative_forward(x)[0, 1, 1, 0]), x)
    assert ones[0, 1, 1, 0] == pytest.approx(-1.0, rel=1e-6)


# ---------------------------------------------------------------- gap/concat

def test_gap():
    out, cache = L.gap_forward(np.full((2, 3, 3, 4), 1.5))
    assert np.all(out == 1.5)
    out, cache = L.gap_forward(np.array([1., 2., 3., 4.]).reshape(1, 2, 2, 1))
    assert out.item() == np.mean([1, 2, 3, 4]) == 2.5
    assert np.array_equal(L.gap_backward(np.ones((1, 1)), cache), np.full((1, 2, 2, 1), 0.25))


def test_concat(rng):
    a, b = rng.normal(size=(2, 512)), rng.normal(size=(2, 224))
    out, split = L.concat_channels(a, b)
    assert out.shape == (2, 736)
    assert np.array_equal(out[:, :512], a)
    ga, gb = L.concat_backward(out, split)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    assert np.array_equal(L.concat_channels(ga, gb)[0], out)
    with pytest.raises(ShapeError):
        L.concat_channels(a, np.zeros((2, 0)))
    with pytest.raises(ShapeError):
        L.concat_channels(a, np.zeros((3, 4)))


# ----------------------------------------------------------------- head/relu

def test_uniform_softmax():
    p, _ = L.dense_softmax_forward(np.ones((3, 10)), L.DenseSoftmaxSpec(10, 6))
    assert np.all(p == 1 / 6)


def test_softmax_sums_to_one(rng):
    logits = rng.uniform(-50, 50, size=(200, 6))
    p = L.softmax(logits)
    assert np.all(p > 0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12


def test_relu():
    y, cache = L.relu_forward(np.array([-3.0, 0.0, 2.0]))
    assert y.tolist() == [0.0, 0.0, 2.0]
    assert L.relu_backward(np.ones(3), cache).tolist() == [0.0, 0.0, 1.0]
