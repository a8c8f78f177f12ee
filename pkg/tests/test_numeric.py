import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as nph

from fedrisk.errors import ConfigError
from fedrisk.numeric import (ParamVector, SeededRng, build_layout, gaussian_vector, l2_norm_sq, matvec,
                             softmax)

finite = st.floats(-50, 50, allow_nan=False)


def test_matvec_identity():
    np.testing.assert_array_equal(matvec(np.eye(3), np.array([1.0, 2.0, 3.0])), [1, 2, 3])


def test_matvec_zero_matrix():
    np.testing.assert_array_equal(matvec(np.zeros((2, 3)), np.array([4.0, -1.0, 7.0])), [0, 0])


def test_matvec_row_sums():
    np.testing.assert_array_equal(matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones(2)), [3, 7])


def test_matvec_dimension_mismatch():
    with pytest.raises(ConfigError):
        matvec(np.ones((2, 3)), np.ones(2))


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.full(4, 2.7)), [0.25] * 4, atol=1e-15)


def test_softmax_single():
    assert softmax(np.array([-3.0])).tolist() == [1.0]


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(np.array([0.0, math.log(2.0)])), [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_softmax_empty():
    with pytest.raises(ConfigError):
        softmax(np.array([]))


@given(nph.arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(v, c):
    p = softmax(v)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(v + c), p, rtol=0, atol=1e-12)


def _pv(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, build_layout([("w", values.shape)]))


def test_l2_norm_sq_examples():
    assert l2_norm_sq(_pv(np.zeros(7))) == 0.0
    assert l2_norm_sq(_pv([3.0, 4.0])) == 25.0
    assert l2_norm_sq(_pv([1.0])) == 1.0


@given(nph.arrays(np.float64, st.integers(1, 40), elements=finite),
       nph.arrays(np.float64, st.integers(1, 40), elements=finite))
def test_l2_norm_sq_additive_over_concat(a, b):
    joint = l2_norm_sq(_pv(np.concatenate([a, b])))
    assert abs(l2_norm_sq(_pv(a)) + l2_norm_sq(_pv(b)) - joint) <= 1e-12 * max(1.0, joint)


def test_gaussian_zero_sigma():
    assert gaussian_vector(SeededRng(1), 5, 0.0).tolist() == [0.0] * 5


def test_gaussian_negative_sigma():
    with pytest.raises(ConfigError):
        gaussian_vector(SeededRng(1), 5, -0.1)


def test_gaussian_moments():
    sigma, n = 0.5, 10**5
    x = gaussian_vector(SeededRng(2024, 7), n, sigma)
    assert abs(x.mean()) <= 4 * sigma / math.sqrt(n)
    assert 0.95 * sigma**2 <= x.var() <= 1.05 * sigma**2


def test_gaussian_deterministic():
    a = gaussian_vector(SeededRng(9, 3), 1000, 1.3)
    b = gaussian_vector(SeededRng(9, 3), 1000, 1.3)
    assert a.tobytes() == b.tobytes()


def test_streams_are_distinct_and_order_free():
    a1 = SeededRng(5, 1).normal(2000)
    b = SeededRng(5, 2).normal(2000)
    a2 = SeededRng(5, 1).normal(2000)
    assert a1.tobytes() == a2.tobytes()
    assert abs(np.corrcoef(a1, b)[0, 1]) < 0.1


def test_substream_does_not_advance_parent():
    r = SeededRng(11, 4)
    child = r.substream(3).normal(10)
    assert SeededRng(11, 4).normal(5).tobytes() == r.normal(5).tobytes()
    assert SeededRng(11, 4).substream(3).normal(10).tobytes() == child.tobytes()


def test_param_vector_layout_and_immutability():
    layout = build_layout([("A", (2, 3)), ("b", (3,))])
    p = ParamVector(np.arange(9.0), layout)
    np.testing.assert_array_equal(p.view("A"), [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(p.view("b"), [6, 7, 8])
    with pytest.raises(ValueError):
        p.data[0] = 1.0
    assert p == p.replace(np.arange(9.0))
    with pytest.raises(ConfigError):
        ParamVector(np.arange(8.0), layout)
