"""Radial and decentering lens distortion."""

from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from targetcal.distortion import distort, distortion_delta, distortion_jacobian, undistort
from targetcal.geometry import InteriorParams

coords = st.floats(-2000.0, 2000.0)


def _interior(k=(-3.8e-9, 1.6e-16), dec=(2e-7, -1e-7)):
    return InteriorParams(2800.0, 1932.0, 1071.0, k, dec)


def test_zero_coefficients():
    dx, dy = distortion_delta(InteriorParams(1000.0, 0.0, 0.0, (0.0, 0.0), (0.0, 0.0)), 123.0, -45.0)
    assert dx == 0.0 and dy == 0.0


def test_k1_on_x_axis():
    dx, dy = distortion_delta(InteriorParams(1000.0, 0.0, 0.0, (1e-7,)), 100.0, 0.0)
    assert np.isclose(dx, 0.1, rtol=1e-12) and dy == 0.0


def test_radial_shift_is_radial():
    K = InteriorParams(1000.0, 0.0, 0.0, (1e-7, -2e-13))
    x, y = 300.0, -400.0
    dx, dy = distortion_delta(K, x, y)
    r = 500.0
    assert np.isclose(np.hypot(dx, dy), abs(1e-7 * r**3 - 2e-13 * r**5), rtol=1e-12)
    assert np.isclose(dx * y - dy * x, 0.0, atol=1e-12)


@given(coords, coords)
def test_radial_model_is_odd(x, y):
    K = _interior(dec=None)
    dx, dy = distortion_delta(K, x, y)
    mx, my = distortion_delta(K, -x, -y)
    assert np.isclose(mx, -dx, rtol=1e-12, atol=1e-12) and np.isclose(my, -dy, rtol=1e-12, atol=1e-12)


def test_decentering_terms():
    K = InteriorParams(1000.0, 0.0, 0.0, (), (1e-6, 0.0))
    dx, dy = distortion_delta(K, 100.0, 0.0)
    # p1 (r^2 + 2 x^2) = 1e-6 * 30000, 2 p1 x y = 0
    assert np.isclose(dx, 0.03) and dy == 0.0


@given(coords, coords)
@settings(max_examples=200)
def test_undistort_inverts_distort(x, y):
    K = _interior()
    ideal = np.array([K.xp + x, K.yp + y])
    assert np.allclose(undistort(K, distort(K, ideal)), ideal, atol=1e-8)


@given(coords, coords)
def test_jacobian_matches_finite_differences(x, y):
    K = _interior()
    J = distortion_jacobian(K, x, y)
    h = 1e-3
    fd = np.empty((2, 2))
    for k, (ex, ey) in enumerate(((h, 0.0), (0.0, h))):
        p = np.array(distortion_delta(K, x + ex, y + ey))
        m = np.array(distortion_delta(K, x - ex, y - ey))
        fd[:, k] = (p - m) / (2 * h)
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_vectorized_shapes():
    K = _interior()
    pts = np.random.default_rng(0).uniform(0, 3000, (4, 5, 2))
    assert distort(K, pts).shape == pts.shape
    assert np.allclose(undistort(K, distort(K, pts)), pts, atol=1e-8)
    assert distortion_jacobian(K, pts[..., 0], pts[..., 1]).shape == (4, 5, 2, 2)


def test_no_distortion_is_identity():
    K = InteriorParams(1000.0, 10.0, 20.0)
    pts = np.array([[0.0, 0.0], [500.0, -300.0]])
    assert np.array_equal(distort(K, pts), pts)
    assert np.array_equal(undistort(K, pts), pts)
