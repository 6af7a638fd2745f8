"""Synthetic scenes, rendering and camera perturbation."""

from __future__ import annotations

import numpy as np
import pytest

from targetcal import synthetic as S
from targetcal.errors import InputError
from targetcal.geometry import ellipse_to_conic


def test_scene_counts_and_visibility(exact_scene):
    truth, _ = exact_scene
    assert len(truth.circles) == 30 and len(truth.exteriors) == 20
    seen = {t: sum(t in v for v in truth.visible.values()) for t in truth.circles}
    assert min(seen.values()) >= 2


def test_default_frame_count():
    assert S.SceneSpec().n_cameras == 90


def test_same_seed_same_scene():
    spec = S.SceneSpec(n_cameras=8, seed=4, noise=0.5, spurious_rate=0.1, mismatch_rate=0.05)
    a, b = S.generate_scene(spec), S.generate_scene(spec)
    assert a.visible == b.visible
    for i in a.exteriors:
        assert np.array_equal(a.exteriors[i].rotation, b.exteriors[i].rotation)
    ra, rb = S.render_observations(a), S.render_observations(b)
    assert ra.labels == rb.labels
    for i in ra.detections:
        assert ra.detections[i] == rb.detections[i]


def test_rendered_conics_annihilate_rim_points():
    spec = S.SceneSpec(n_cameras=6, kappa=(), seed=2)
    truth = S.generate_scene(spec, strict=False)
    rendered = S.render_observations(truth)
    K = truth.interior
    worst = 0.0
    for lb in rendered.labels:
        circle = truth.circles[lb.target]
        E = truth.exteriors[lb.image]
        u, v = circle.basis()
        C = ellipse_to_conic(rendered.detections[lb.image][lb.index]).matrix
        for phi in np.linspace(0, 2 * np.pi, 8, endpoint=False):
            X = circle.center + circle.radius * (np.cos(phi) * u + np.sin(phi) * v)
            Xc = E.to_camera(X)
            x = np.array([K.xp + K.c * Xc[0] / Xc[2], K.yp + K.c * Xc[1] / Xc[2], 1.0])
            worst = max(worst, abs(x @ C @ x) / (np.linalg.norm(C) * (x @ x)))
    assert worst < 1e-9


def test_ellipse_center_is_not_projected_center(exact_scene):
    truth, rendered = exact_scene
    offs = [np.linalg.norm([rendered.detections[lb.image][lb.index].cx - truth.true_center(lb.image, lb.target)[0],
                            rendered.detections[lb.image][lb.index].cy - truth.true_center(lb.image, lb.target)[1]])
            for lb in rendered.labels]
    assert max(offs) > 0.05


def test_spurious_label_counts():
    truth = S.generate_scene(S.SceneSpec(n_cameras=20, spurious_rate=0.1))
    rendered = S.render_observations(truth)
    expected = sum(int(round(0.1 * len(v))) for v in truth.visible.values())
    assert sum(lb.kind == "spurious" for lb in rendered.labels) == expected
    assert sum(lb.kind == "target" for lb in rendered.labels) == sum(len(v) for v in truth.visible.values())
    assert len(rendered.labels) == sum(len(d) for d in rendered.detections.values())
    assert all(lb.target is None for lb in rendered.labels if lb.kind != "target")


def test_planted_mismatches_recorded():
    truth = S.generate_scene(S.SceneSpec(n_cameras=20, mismatch_rate=0.05))
    rendered = S.render_observations(truth)
    assert len(rendered.mismatches) > 0
    assert sum(lb.kind == "mismatch" for lb in rendered.labels) == len(rendered.mismatches)


def test_feature_outliers_recorded():
    truth = S.generate_scene(S.SceneSpec(n_cameras=8, seed=5, feature_outlier_rate=0.1))
    rendered = S.render_observations(truth)
    assert rendered.feature_outliers
    tracks = {t.id: t for t in rendered.features}
    for f, im in rendered.feature_outliers:
        assert im in tracks[f].observations


def test_perturbed_cameras_stay_near_truth(exact_scene):
    truth, _ = exact_scene
    K0, E0 = S.perturb_cameras(truth, 1, c_rel=0.02)
    assert abs(K0.c / truth.interior.c - 1) == pytest.approx(0.02)
    assert K0.n_radial == 0
    for i, E in E0.items():
        R = E.rotation @ truth.exteriors[i].rotation.T
        ang = np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1)))
        assert ang == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("kw", [dict(n_targets=0), dict(radius_range=(0.0, 0.1)), dict(noise=-1.0),
                                dict(spurious_rate=1.5), dict(kappa=(0.0,) * 6)])
def test_spec_validation(kw):
    with pytest.raises(InputError):
        S.SceneSpec(**kw)


def test_camera_inside_wall_rejected():
    with pytest.raises(InputError, match="wall"):
        S.generate_scene(S.SceneSpec(n_cameras=4, azimuth_range=(150.0, 160.0)))


def test_unseen_targets_rejected_in_strict_mode():
    spec = S.SceneSpec(n_cameras=1)
    with pytest.raises(InputError, match="fewer than 2"):
        S.generate_scene(spec)
    assert S.generate_scene(spec, strict=False).exteriors
