import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dpvd import core
from dpvd.core import Rng


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_hand_cases():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(core.matmul(np.eye(2), m), m)
    assert np.array_equal(core.matmul([[1, 2]], [[3], [4]]), [[11.0]])


@pytest.mark.parametrize("shape", [(5, 7, 3), (8, 8, 8)])
def test_matmul_matches_triple_loop(shape):
    rng = np.random.default_rng(1)
    n, k, m = shape
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    expected = naive_matmul(a, b)
    np.testing.assert_allclose(core.matmul(a, b), expected, rtol=1e-12, atol=1e-13)


def test_matmul_dimension_mismatch():
    with pytest.raises(core.DimensionError):
        core.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_gaussian_sample_degenerate_and_errors():
    out = core.gaussian_sample(Rng(0), 3, 4, mean=3.0, std=0.0)
    assert np.all(out == 3.0)
    with pytest.raises(ValueError):
        core.gaussian_sample(Rng(0), 1, 1, std=-1.0)


def test_gaussian_sample_moments():
    x = core.gaussian_sample(Rng(7), 1000, 1000, mean=0.0, std=2.0)
    assert abs(x.mean()) < 0.01
    assert abs(x.std() / 2.0 - 1) < 0.01


def test_rng_determinism_and_spawn():
    a = core.gaussian_sample(Rng(42), 4, 5)
    b = core.gaussian_sample(Rng(42), 4, 5)
    assert np.array_equal(a, b)
    c1, c2 = Rng(42).spawn(2)
    d1, _ = Rng(42).spawn(2)
    assert np.array_equal(c1.normal(10), d1.normal(10))
    assert not np.array_equal(Rng(42).spawn(2)[0].normal(10), c2.normal(10))


def test_l2_norm():
    assert core.l2_norm([[3.0, 4.0]]) == 5.0
    assert core.l2_norm(np.zeros((3, 3))) == 0.0
    v = np.random.default_rng(3).normal(size=(6, 4))
    expected = sum(x * x for x in v.ravel()) ** 0.5
    assert core.l2_norm(v) == pytest.approx(expected, rel=1e-14)


def test_clip_to_norm_examples():
    v = np.array([[3.0, 4.0]])
    out = core.clip_to_norm(v, 2.0)
    np.testing.assert_allclose(out, 0.4 * v)
    assert core.l2_norm(out) == pytest.approx(2.0)
    small = np.array([[0.6, 0.8]])
    assert np.array_equal(core.clip_to_norm(small, 2.0), small)
    with pytest.raises(ValueError):
        core.clip_to_norm(v, 0.0)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.01, 100))
def test_clip_to_norm_properties(v, c):
    out = core.clip_to_norm(v, c)
    assert core.l2_norm(out) <= c * (1 + 1e-12)
    # non-negative multiple of the input
    k = core.l2_norm(out) / core.l2_norm(v) if core.l2_norm(v) > 0 else 0.0
    np.testing.assert_allclose(out, k * v, atol=1e-12 * (1 + np.abs(v).max()))


@given(arrays(np.float64, (4, 6), elements=finite), st.floats(-50, 50))
@settings(max_examples=50)
def test_softmax_rows_and_shift_invariance(z, shift):
    p = core.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(core.softmax(z + shift), p, atol=1e-12)


def test_log_softmax_large_logits():
    out = core.log_softmax([[1000.0, 0.0, -1000.0]])
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(0.0)


def test_elementwise_helpers():
    a = np.array([[1.0, -2.0]])
    b = np.array([[3.0, 4.0]])
    assert np.array_equal(core.add(a, b), [[4.0, 2.0]])
    assert np.array_equal(core.sub(a, b), [[-2.0, -6.0]])
    assert np.array_equal(core.mul(a, b), [[3.0, -8.0]])
    assert np.array_equal(core.scale(a, 2), [[2.0, -4.0]])
    assert np.array_equal(core.relu(a), [[1.0, 0.0]])
    assert np.array_equal(core.transpose(a), [[1.0], [-2.0]])
    assert np.array_equal(core.rows(np.arange(6.0).reshape(3, 2), [2, 0]), [[4.0, 5.0], [0.0, 1.0]])
    with pytest.raises(core.DimensionError):
        core.add(a, np.ones((2, 2)))
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        core.scale([[1e308]], 10.0)
