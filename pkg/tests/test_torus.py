import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dalab.torus import AdaptedMetric, InvalidInput, lift_near, torus_delta, torus_distance, wrap

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
unit = st.floats(0, 1, exclude_max=True, allow_nan=False)


def brute_distance(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    best = np.inf
    for shift in itertools.product((-1, 0, 1), repeat=len(a)):
        best = min(best, np.linalg.norm(wrap(a) - wrap(b) + np.array(shift)))
    return best


def test_wrap_examples():
    assert np.allclose(wrap([1.25, -0.5, 3.0, 0.0]), [0.25, 0.5, 0.0, 0.0], atol=0)
    assert np.array_equal(wrap([0.0, 0.0, 0.0, 0.0]), np.zeros(4))
    assert np.allclose(wrap([7.1] * 4), [0.1] * 4, atol=1e-12)


def test_wrap_rejects_non_finite():
    with pytest.raises(InvalidInput):
        wrap([np.nan, 0, 0, 0])
    with pytest.raises(InvalidInput):
        wrap([np.inf, 0, 0, 0])


def test_lift_near_examples():
    assert np.allclose(lift_near([0.9, 0, 0, 0], [2.0, 0, 0, 0]), [1.9, 0, 0, 0])
    assert np.allclose(lift_near([0.1, 0, 0, 0], [0, 0, 0, 0]), [0.1, 0, 0, 0])
    assert np.allclose(lift_near([0.6] * 4, [0] * 4), [-0.4] * 4)


def test_distance_examples():
    assert torus_distance([0.9, 0, 0, 0], [0.1, 0, 0, 0]) == pytest.approx(0.2)
    assert torus_distance([0.3, 0.2, 0.1, 0.9], [0.3, 0.2, 0.1, 0.9]) == 0.0
    # oracle: brute force over the 3^d nearest deck translates
    assert torus_distance([0.5, 0.5, 0, 0], [0, 0, 0, 0]) == pytest.approx(brute_distance([0.5, 0.5, 0, 0], [0] * 4))
    assert torus_distance([0.5, 0.5, 0, 0], [0, 0, 0, 0]) == pytest.approx(np.sqrt(0.5))


@settings(max_examples=200, deadline=None)
@given(arrays(float, 4, elements=unit), arrays(float, 4, elements=coords))
def test_wrap_of_lift_is_identity(p, anchor):
    lifted = lift_near(p, anchor)
    assert np.all(np.abs(lifted - anchor) <= 0.5 + 1e-12)
    back = wrap(lifted)
    d = np.abs(back - p)
    assert np.all(np.minimum(d, 1 - d) < 1e-9)


@settings(max_examples=200, deadline=None)
@given(arrays(float, 4, elements=coords), arrays(float, 4, elements=coords),
       arrays(int, 4, elements=st.integers(-5, 5)))
def test_distance_properties(a, b, k):
    d = torus_distance(a, b)
    assert d <= np.linalg.norm(a - b) + 1e-9
    assert d == pytest.approx(brute_distance(a, b), abs=1e-9)
    assert torus_distance(a + k, b) == pytest.approx(d, abs=1e-9)
    assert torus_distance(b, a) == pytest.approx(d, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(float, 4, elements=unit), arrays(float, 4, elements=unit), arrays(float, 4, elements=unit))
def test_triangle_inequality(a, b, c):
    assert torus_distance(a, c) <= torus_distance(a, b) + torus_distance(b, c) + 1e-12


def test_torus_delta_is_short():
    rng = np.random.default_rng(0)
    a, b = rng.random((100, 4)), rng.random((100, 4))
    d = torus_delta(a, b)
    assert np.all(np.abs(d) <= 0.5 + 1e-12)


def test_adapted_metric_round_trip(frame100):
    m = AdaptedMetric(frame100.vectors)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((10, 4))
    assert np.allclose(m.vectors(m.coords(v)), v, atol=1e-10)
    # eigenvectors are orthonormal in the adapted metric
    assert np.allclose(m.norm(frame100.vectors.T), 1.0, atol=1e-10)
    J = m.conjugate(frame100.matrix.array())
    assert np.allclose(J, np.diag(frame100.values), atol=1e-8)
