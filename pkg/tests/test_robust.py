"""LMedS estimation, epipolar geometry, robust triangulation and camera refinement."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetcal import synthetic as S
from targetcal.errors import DegenerateGeometryError, InputError, InsufficientDataError
from targetcal.geometry import ExteriorParams, InteriorParams, ProjectiveCamera, triangulate
from targetcal.matching import chi2_quantile_2dof
from targetcal.robust import (
    FundamentalModel,
    Line2DModel,
    PairGeometry,
    epipolar_distance,
    epipolar_distances,
    estimate_fundamental,
    fundamental_from_cameras,
    lmeds_estimate,
    n_subsamples,
    refine_cameras,
    robust_scale,
    robust_triangulate,
    triangulation_covariance,
)


@pytest.fixture(scope="module")
def camera_pair(exact_scene):
    truth, _ = exact_scene
    K = truth.interior.pinhole()
    return truth, ProjectiveCamera.compose(K, truth.exteriors[0]), ProjectiveCamera.compose(K, truth.exteriors[5])


def _correspondences(P1, P2, seed, n=200, noise=0.0, fraction=0.0, detectable=False):
    """Noisy correspondences with gross outliers planted in the second image.

    With ``detectable`` an outlier is redrawn until it sits at least 20 px off
    its true epipolar line; a shift along the line is invisible to any
    two-view test.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.5, 2.0, (n, 3))
    x1, x2 = P1.project(X), P2.project(X)
    y1 = x1 + rng.normal(0, noise, x1.shape) if noise else x1.copy()
    y2 = x2 + rng.normal(0, noise, x2.shape) if noise else x2.copy()
    out = rng.choice(n, int(round(fraction * n)), replace=False)
    F = fundamental_from_cameras(P1, P2)
    for k in out:
        while True:
            shift = rng.uniform(30, 200, 2) * rng.choice([-1, 1], 2)
            if not detectable or epipolar_distance(F, x1[k], x2[k] + shift) >= 20.0:
                break
        y2[k] += shift
    clean = np.ones(n, bool)
    clean[out] = False
    return x1, x2, y1, y2, clean


# -- LMedS core --------------------------------------------------------------


def test_subsample_count_formula():
    # 1 - (1 - (1 - eps)^p)^m >= 0.99 at eps = 0.5
    for p in (2, 3, 8):
        m = n_subsamples(p, 0.5)
        assert 1 - (1 - 0.5**p) ** m >= 0.99
        assert 1 - (1 - 0.5**p) ** (m - 1) < 0.99


def test_robust_scale_constant():
    r2 = np.full(20, 4.0)
    assert np.isclose(robust_scale(r2, 2), 1.4826 * (1 + 5 / 18) * 2.0)


def test_line_exact_consensus():
    rng = np.random.default_rng(0)
    t = rng.uniform(-10, 10, 60)
    pts = np.column_stack([t, 0.5 * t + 2.0])
    out = rng.choice(60, 25, replace=False)
    pts[out] += rng.uniform(5, 20, (25, 2))
    res = lmeds_estimate("line", pts, 3)
    assert res.sigma < 1e-8
    clean = np.ones(60, bool)
    clean[out] = False
    assert np.array_equal(res.inliers, clean)


def test_lmeds_deterministic(camera_pair):
    _, P1, P2 = camera_pair
    _, _, y1, y2, _ = _correspondences(P1, P2, 4, noise=0.5, fraction=0.3)
    a = lmeds_estimate(FundamentalModel(y1, y2), None, 9)
    b = lmeds_estimate(FundamentalModel(y1, y2), None, 9)
    assert np.array_equal(a.model, b.model) and np.array_equal(a.inliers, b.inliers) and a.sigma == b.sigma


def test_lmeds_errors():
    with pytest.raises(InsufficientDataError):
        lmeds_estimate("line", np.zeros((1, 2)))
    with pytest.raises(InputError):
        lmeds_estimate("circle", np.zeros((5, 2)))


# -- fundamental matrix ------------------------------------------------------


def test_pure_translation_fundamental():
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([np.eye(3), -np.array([[1.0], [0.0], [0.0]])])
    F = fundamental_from_cameras(P1, P2)
    expected = np.array([[0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]]) / math.sqrt(2)
    assert np.allclose(F, expected, atol=1e-12) or np.allclose(F, -expected, atol=1e-12)


def test_noise_free_estimate(camera_pair):
    _, P1, P2 = camera_pair
    x1, x2, *_ = _correspondences(P1, P2, 0, n=60)
    g = estimate_fundamental((x1, x2), 0)
    assert np.max(epipolar_distances(g.F, x1, x2)) < 1e-8
    assert g.sigma < 1e-8
    assert abs(np.linalg.det(g.F)) < 1e-10
    assert len(g.inliers) == 60


def test_planted_outliers_flagged(camera_pair):
    _, P1, P2 = camera_pair
    for fraction in (0.2, 0.3):
        _, _, y1, y2, clean = _correspondences(P1, P2, 1, noise=0.3, fraction=fraction, detectable=True)
        g = estimate_fundamental((y1, y2), 1)
        flagged = np.ones(len(clean), bool)
        flagged[list(g.inliers)] = False
        assert np.all(flagged[~clean])


def test_breakdown_at_45_percent(camera_pair):
    _, P1, P2 = camera_pair
    good = 0
    for seed in range(100):
        x1, x2, y1, y2, clean = _correspondences(P1, P2, seed, noise=0.5, fraction=0.45)
        g = estimate_fundamental((y1, y2), seed)
        good += np.max(epipolar_distances(g.F, x1[clean], x2[clean])) < 3 * 0.5
    assert good >= 95


@pytest.mark.parametrize("noise", [0.5, 1.0])
def test_epipolar_scale_matches_distance_spread(camera_pair, noise):
    _, P1, P2 = camera_pair
    _, _, y1, y2, _ = _correspondences(P1, P2, 3, n=300, noise=noise)
    g = estimate_fundamental((y1, y2), 1)
    D = epipolar_distances(fundamental_from_cameras(P1, P2), y1, y2)
    spread = math.sqrt(np.mean(D**2))
    assert 0.7 * spread <= g.sigma <= 1.3 * spread


def test_estimate_needs_eight():
    with pytest.raises(InsufficientDataError):
        estimate_fundamental((np.zeros((7, 2)), np.zeros((7, 2))))


def test_pair_geometry_normalized():
    F = np.array([[0, 0, 0], [0, 0, -2.0], [0, 2.0, 0]])
    g = PairGeometry(0, 1, F, 0.5)
    assert np.isclose(np.linalg.norm(g.F), 1.0)
    with pytest.raises(InputError):
        PairGeometry(0, 1, F, -1.0)


# -- epipolar distance -------------------------------------------------------


def test_distance_zero_on_lines(camera_pair):
    _, P1, P2 = camera_pair
    F = fundamental_from_cameras(P1, P2)
    X = np.array([1.0, 1.2, 0.8])
    assert epipolar_distance(F, P1.project(X)[0], P2.project(X)[0]) < 1e-9


@given(st.lists(st.floats(-1000, 1000), min_size=4, max_size=4))
@settings(max_examples=50)
def test_distance_symmetric(v):
    F = np.array([[1e-7, -3e-6, 1e-3], [2e-6, 1e-7, -4e-3], [-2e-3, 3e-3, 1.0]])
    x, xp = np.array(v[:2]), np.array(v[2:])
    assert np.isclose(epipolar_distance(F, x, xp), epipolar_distance(F.T, xp, x), rtol=1e-12, atol=1e-12)


def test_degenerate_line_rejected():
    F = np.zeros((3, 3))
    F[2, 2] = 1.0
    with pytest.raises(DegenerateGeometryError):
        epipolar_distance(F, [0.0, 0.0], [1.0, 1.0])


def test_gate_constant():
    assert math.isclose(math.sqrt(chi2_quantile_2dof(0.975)), 2.7162, abs_tol=1e-4)


# -- robust triangulation ----------------------------------------------------


def _views(truth, t, ims, rng=None, noise=0.0):
    K = truth.interior.pinhole()
    X = truth.circles[t].center
    cams = [ProjectiveCamera.compose(K, truth.exteriors[i]) for i in ims]
    xs = [c.project(X)[0] + (rng.normal(0, noise, 2) if noise else 0.0) for c in cams]
    return cams, xs, X


def _well_seen(truth, n=5):
    seen: dict = {}
    for im, ts in truth.visible.items():
        for t in ts:
            seen.setdefault(t, []).append(im)
    t = max(seen, key=lambda k: len(seen[k]))
    return t, seen[t][:n]


def test_exact_views_match_dlt(exact_scene):
    truth, _ = exact_scene
    t, ims = _well_seen(truth)
    cams, xs, X = _views(truth, t, ims)
    rt = robust_triangulate(list(zip(cams, xs)), 0)
    assert rt.inliers.all()
    assert np.allclose(rt.point, triangulate(list(zip(cams, xs))).point, atol=1e-9)


def test_gross_error_flagged(exact_scene):
    truth, _ = exact_scene
    t, ims = _well_seen(truth)
    cams, xs, X = _views(truth, t, ims)
    xs[2] = xs[2] + np.array([30.0, 40.0])
    rt = robust_triangulate(list(zip(cams, xs)), 0)
    assert list(rt.inliers) == [True, True, False, True, True]
    assert np.linalg.norm(rt.point - X) < 1e-6


def test_two_views_fall_back_to_pair(exact_scene):
    truth, _ = exact_scene
    t, ims = _well_seen(truth, 2)
    cams, xs, X = _views(truth, t, ims)
    xs[1] = xs[1] + 5.0
    rt = robust_triangulate(list(zip(cams, xs)), 0)
    assert rt.inliers.all()
    with pytest.raises(InsufficientDataError):
        robust_triangulate(list(zip(cams, xs))[:1], 0)


# -- triangulation covariance ------------------------------------------------


def _camera_at(x, depth=5.0):
    return ProjectiveCamera.compose(InteriorParams(1000.0, 0.0, 0.0), ExteriorParams(np.eye(3), [x, 0.0, -depth]))


def test_covariance_scales_with_variance():
    a, b = _camera_at(-1.0), _camera_at(1.0)
    X = np.zeros(3)
    c1 = triangulation_covariance(a, b, X, 0.5)
    c2 = triangulation_covariance(a, b, X, 1.5)
    assert np.allclose(c2, 9.0 * c1)
    assert np.allclose(c1, c1.T) and np.all(np.linalg.eigvalsh(c1) > 0)


def test_wide_baseline_has_smaller_covariance():
    X = np.zeros(3)
    wide = triangulation_covariance(_camera_at(-1.0), _camera_at(1.0), X, 1.0)
    narrow = triangulation_covariance(_camera_at(-0.1), _camera_at(0.1), X, 1.0)
    assert np.linalg.det(wide) < np.linalg.det(narrow)


def test_parallel_rays_rejected():
    with pytest.raises(DegenerateGeometryError):
        triangulation_covariance(_camera_at(0.0), _camera_at(0.0, depth=6.0), np.zeros(3), 1.0)


# -- camera refinement -------------------------------------------------------


def test_refine_fixed_point(small_scene):
    truth, rendered = small_scene
    res = refine_cameras(rendered.features, truth.interior, truth.exteriors, 0)
    assert not res.pruned_pair and not res.pruned_triangulation
    assert res.rmse_after < 1e-8
    for im, E in truth.exteriors.items():
        assert np.allclose(res.exteriors[im].center, E.center, atol=1e-8)
        assert np.allclose(res.exteriors[im].rotation, E.rotation, atol=1e-8)


def test_refine_removes_planted_outliers_and_reduces_error():
    spec = S.SceneSpec(n_cameras=8, seed=5, noise=0.3, feature_outlier_rate=0.05)
    truth = S.generate_scene(spec)
    rendered = S.render_observations(truth)
    K0, E0 = S.perturb_cameras(truth, 2, keep_distortion=True)
    res = refine_cameras(rendered.features, K0, E0, 0)
    removed = set(res.pruned_pair) | set(res.pruned_triangulation)
    assert set(rendered.feature_outliers) <= removed
    assert res.rmse_after <= res.rmse_before
    assert abs(res.interior.c - truth.interior.c) / truth.interior.c < 0.01


def test_refine_requires_all_cameras(small_scene):
    truth, rendered = small_scene
    ext = dict(truth.exteriors)
    ext.pop(min(ext))
    with pytest.raises(InputError):
        refine_cameras(rendered.features, truth.interior, ext, 0)


def test_line_model_available():
    assert Line2DModel(np.zeros((3, 2))).sample_size == 2
