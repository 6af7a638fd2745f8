"""Shared synthetic scenes and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from targetcal import synthetic as S
from targetcal.bundle import NetworkState, Observation, ObservationSet
from targetcal.geometry import ExteriorParams, InteriorParams, rotation_from_axis_angle
from targetcal.synthetic import look_at


@pytest.fixture(scope="session")
def exact_scene():
    """Noise-free oracle: 30 targets on two walls seen from 20 views."""
    truth = S.generate_scene(S.SceneSpec(n_cameras=20))
    return truth, S.render_observations(truth)


@pytest.fixture(scope="session")
def small_scene():
    truth = S.generate_scene(S.SceneSpec(n_cameras=8, seed=5))
    return truth, S.render_observations(truth)


def label_map(rendered) -> dict:
    return {(lb.image, lb.index): lb.target for lb in rendered.labels}


def center_observations(truth, noise: float = 0.0, seed: int = 0, weight: float = 1.0) -> ObservationSet:
    """Observations at the true projected circle centers, optionally with Gaussian noise."""
    rng = np.random.default_rng(seed)
    recs = []
    for im in sorted(truth.visible):
        for t in truth.visible[im]:
            x, y = truth.true_center(im, t) + (rng.normal(0, noise, 2) if noise else 0.0)
            recs.append(Observation(im, t, float(x), float(y), weight))
    return ObservationSet.from_records(recs)


def true_state(truth, interior: InteriorParams | None = None) -> NetworkState:
    return NetworkState(interior or truth.interior, dict(truth.exteriors),
                        {t: c.center.copy() for t, c in truth.circles.items()})


def random_network(rng, n_images: int = 4, n_points: int = 12, n_radial: int = 3, decentering: bool = True):
    """Small random network of cameras looking at a point cloud near the origin."""
    interior = InteriorParams(
        float(rng.uniform(800, 3000)), float(rng.uniform(400, 1000)), float(rng.uniform(300, 700)),
        tuple(float(rng.uniform(-1, 1)) * 10.0 ** (-7 - 6 * i) for i in range(n_radial)),
        (float(rng.uniform(-1e-6, 1e-6)), float(rng.uniform(-1e-6, 1e-6))) if decentering else None,
    )
    exteriors = {}
    for i in range(n_images):
        az = rng.uniform(0, 2 * np.pi)
        C = np.array([4 * np.cos(az), 4 * np.sin(az), rng.uniform(-1, 1)])
        R = rotation_from_axis_angle(rng.normal(0, 0.05, 3)) @ look_at(C, np.zeros(3), rng.uniform(0, np.pi))
        exteriors[i] = ExteriorParams(R, C)
    points = {t: rng.uniform(-0.5, 0.5, 3) for t in range(n_points)}
    return NetworkState(interior, exteriors, points)


def network_observations(state: NetworkState) -> ObservationSet:
    from targetcal.geometry import project_point

    recs = []
    for im, E in state.exteriors.items():
        for t, X in state.points.items():
            x, y = project_point(state.interior, E, X)
            recs.append(Observation(im, t, float(x), float(y)))
    return ObservationSet.from_records(recs)


def truth_tracks(truth, rendered, corrected: bool = True) -> list:
    """Ground-truth tracks built from the labels; corrected centers are the true projected centers."""
    from targetcal.matching import TargetTrack, TrackView

    views: dict = {}
    for lb in rendered.labels:
        if lb.target is None:
            continue
        c = truth.true_center(lb.image, lb.target) if corrected else None
        views.setdefault(lb.target, {})[lb.image] = TrackView(lb.index, rendered.detections[lb.image][lb.index], c)
    return [TargetTrack(t, v, truth.circles[t].center.copy()) for t, v in sorted(views.items()) if len(v) >= 2]
