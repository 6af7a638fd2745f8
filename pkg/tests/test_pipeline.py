"""Outer calibration loop and its stages."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import label_map
from targetcal.errors import InputError
from targetcal.matching import matching_metrics, track_signature
from targetcal.pipeline import PipelineOptions, calibrate_pipeline, observations_from_tracks, stage_rng


@pytest.fixture(scope="module")
def exact_run(exact_scene):
    truth, rendered = exact_scene
    res = calibrate_pipeline(rendered.detections, truth.interior, truth.exteriors, PipelineOptions(seed=0),
                             features=rendered.features)
    return truth, rendered, res


def test_exact_scene_full_match_set_quickly(exact_run):
    truth, rendered, res = exact_run
    assert res.converged and res.iterations <= 3
    m = matching_metrics(res.tracks, label_map(rendered))
    assert m["precision"] == 1.0 and m["recall"] == 1.0
    assert res.solution.interior.c == pytest.approx(truth.interior.c, rel=1e-9)
    assert res.history[-1].rmse < 1e-6


def test_rerun_on_converged_output_is_fixed_point(exact_run):
    truth, rendered, res = exact_run
    sol = res.solution
    again = calibrate_pipeline(rendered.detections, sol.interior, {**truth.exteriors, **sol.exteriors},
                               PipelineOptions(seed=0), pairs=res.pairs)
    assert track_signature(again.tracks) == track_signature(res.tracks)
    assert again.solution.interior.c == pytest.approx(sol.interior.c, rel=1e-9)
    assert again.solution.interior.n_radial == sol.interior.n_radial


def test_history_records_each_iteration(exact_run):
    _, _, res = exact_run
    assert [h.iteration for h in res.history] == list(range(1, res.iterations + 1))
    assert all(h.n_tracks == len(res.tracks) for h in res.history[-1:])


@pytest.mark.parametrize("kw", [dict(distortion_terms=6), dict(max_outer_iters=0), dict(chi2_p=1.0)])
def test_option_validation(kw):
    with pytest.raises(InputError):
        PipelineOptions(**kw)


def test_needs_two_images(exact_scene):
    truth, rendered = exact_scene
    with pytest.raises(InputError, match="at least 2 images"):
        calibrate_pipeline({0: rendered.detections[0]}, truth.interior, truth.exteriors,
                           features=rendered.features)


def test_needs_features_or_pairs(exact_scene):
    truth, rendered = exact_scene
    with pytest.raises(InputError, match="feature tracks or pair geometry"):
        calibrate_pipeline(rendered.detections, truth.interior, truth.exteriors)


def test_needs_camera_per_image(exact_scene):
    truth, rendered = exact_scene
    ext = dict(truth.exteriors)
    ext.pop(3)
    with pytest.raises(InputError, match=r"\[3\]"):
        calibrate_pipeline(rendered.detections, truth.interior, ext, features=rendered.features)


def test_stage_rng_reproducible():
    assert np.array_equal(stage_rng(3, 2).random(5), stage_rng(3, 2).random(5))
    assert not np.array_equal(stage_rng(3, 2).random(5), stage_rng(3, 1).random(5))


def test_observations_from_tracks_use_inlier_views(exact_run):
    _, _, res = exact_run
    recs = observations_from_tracks(res.tracks, 4.0)
    assert len(recs) == sum(len(t.inlier_views()) for t in res.tracks)
    assert all(r.weight == 4.0 for r in recs)
