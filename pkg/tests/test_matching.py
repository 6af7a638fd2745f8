"""Pencil correspondence test, pairwise matching, chaining, verification and metrics."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from conftest import label_map, truth_tracks
from targetcal.errors import InputError
from targetcal.geometry import Ellipse
from targetcal.matching import (
    CameraSet,
    PairMatchSet,
    TargetTrack,
    TrackView,
    chain_tracks,
    chi2_quantile_2dof,
    count_outcomes,
    match_pair,
    matching_metrics,
    metrics_from_counts,
    pencil_coefficients,
    verify_tracks,
    view_cone,
)
from targetcal.pipeline import pair_geometries_from_cameras


def _cams(truth):
    return CameraSet(truth.interior, truth.exteriors)


def _cone(truth, rendered, im, t):
    idx = next(lb.index for lb in rendered.labels if lb.image == im and lb.target == t)
    return view_cone(rendered.detections[im][idx], truth.interior, truth.exteriors[im])


def _shared(truth, i, j):
    return sorted(set(truth.visible[i]) & set(truth.visible[j]))


# -- pencil ------------------------------------------------------------------


def test_pencil_of_identical_cones_vanishes(exact_scene):
    truth, rendered = exact_scene
    A = _cone(truth, rendered, 0, truth.visible[0][0])
    p = pencil_coefficients(A, A)
    assert np.max(np.abs(p.I)) < 1e-12
    assert abs(p.delta) < 1e-20


def test_pencil_reproduces_determinant(exact_scene):
    truth, rendered = exact_scene
    t = _shared(truth, 0, 5)[0]
    A, B = _cone(truth, rendered, 0, t).matrix, _cone(truth, rendered, 5, t).matrix
    p = pencil_coefficients(A, B)
    An, Bn = A / np.linalg.norm(A), B / np.linalg.norm(B)
    for lam in (-3.0, -0.4, 0.7, 5.0):
        d = np.linalg.det(An + lam * Bn)
        scale = np.linalg.det(np.abs(An) + abs(lam) * np.abs(Bn)) + 1e-300
        assert abs(p(lam) - d) <= 1e-8 * max(abs(d), abs(scale))


def test_matching_cones_score_far_below_others(exact_scene):
    truth, rendered = exact_scene
    shared = _shared(truth, 3, 4)
    same = [abs(pencil_coefficients(_cone(truth, rendered, 3, t), _cone(truth, rendered, 4, t)).delta)
            for t in shared]
    other = [abs(pencil_coefficients(_cone(truth, rendered, 3, t), _cone(truth, rendered, 4, u)).delta)
             for t in shared for u in shared if u != t]
    assert max(same) < 1e-9
    assert min(other) >= 1e3 * max(same)


def test_pencil_rejects_non_symmetric():
    A = np.eye(4)
    B = np.eye(4)
    B[0, 1] = 1.0
    with pytest.raises(InputError):
        pencil_coefficients(A, B)


def test_chi2_quantile():
    assert math.isclose(chi2_quantile_2dof(0.975), -2 * math.log(0.025))
    with pytest.raises(InputError):
        chi2_quantile_2dof(1.0)


# -- pairwise matching -------------------------------------------------------


def test_exact_pair_with_23_overlapping_targets(exact_scene):
    truth, rendered = exact_scene
    i, j = 3, 4
    assert len(_shared(truth, i, j)) == 23
    cams = _cams(truth)
    geom = pair_geometries_from_cameras(cams, [i, j], 0.5)[(i, j)]
    pm = match_pair(rendered.detections[i], rendered.detections[j], geom, cams)
    labels = label_map(rendered)
    assert len(pm.matches) == 23
    assert all(labels[(i, k)] == labels[(j, m)] for k, m, _ in pm.matches)


def test_missing_geometry_rejected(exact_scene):
    truth, rendered = exact_scene
    with pytest.raises(InputError, match="missing pair geometry"):
        match_pair(rendered.detections[0], rendered.detections[1], None, _cams(truth))


def test_nothing_within_gate(exact_scene):
    truth, rendered = exact_scene
    i, j = 3, 4
    t = _shared(truth, i, j)[0]
    labels = label_map(rendered)
    k = next(idx for (im, idx), tg in labels.items() if im == i and tg == t)
    m = next(idx for (im, idx), tg in labels.items() if im == j and tg == t)
    cams = _cams(truth)
    geom = pair_geometries_from_cameras(cams, [i, j], 0.5)[(i, j)]
    ei, ej = rendered.detections[i][k], rendered.detections[j][m]
    line = geom.F @ np.array([ei.cx, ei.cy, 1.0])
    n = line[:2] / np.hypot(*line[:2])
    moved = ej.translated(*(200.0 * n))  # straight off the epipolar line
    assert match_pair([ei], [moved], geom, cams).matches == []
    assert match_pair([ei], [ej], geom, cams).matches[0][:2] == (0, 0)


def test_unreciprocated_minimum_left_unmatched(exact_scene):
    truth, rendered = exact_scene
    i, j = 3, 4
    t = _shared(truth, i, j)[0]
    labels = label_map(rendered)
    k = next(idx for (im, idx), tg in labels.items() if im == i and tg == t)
    m = next(idx for (im, idx), tg in labels.items() if im == j and tg == t)
    e = rendered.detections[i][k]
    # a slightly enlarged copy on the same center also prefers the one partner in j
    decoy = Ellipse.canonical(e.cx, e.cy, 1.1 * e.a, 1.1 * e.b, e.theta)
    cams = _cams(truth)
    geom = pair_geometries_from_cameras(cams, [i, j], 0.5)[(i, j)]
    pm = match_pair([decoy, e], [rendered.detections[j][m]], geom, cams)
    assert [(a, b) for a, b, _ in pm.matches] == [(1, 0)]


def test_pair_match_set_is_one_to_one():
    with pytest.raises(InputError):
        PairMatchSet(0, 1, [(0, 1, 0.0), (0, 2, 0.0)])


# -- chaining ----------------------------------------------------------------


def _dets(n_images=5, n=3):
    return {im: [Ellipse(100.0 * k + 50, 50.0, 10.0, 5.0, 0.0) for k in range(n)] for im in range(n_images)}


def _members(tracks):
    return sorted(sorted((im, v.index) for im, v in t.views.items()) for t in tracks)


def test_chaining_is_transitive():
    pms = [PairMatchSet(1, 2, [(1, 2, 0.01)]), PairMatchSet(2, 3, [(2, 0, 0.01)])]
    assert _members(chain_tracks(pms, _dets())) == [[(1, 1), (2, 2), (3, 0)]]


def test_disjoint_matches_give_two_tracks():
    pms = [PairMatchSet(0, 1, [(0, 0, 0.01)]), PairMatchSet(2, 3, [(1, 1, 0.01)])]
    assert _members(chain_tracks(pms, _dets())) == [[(0, 0), (1, 0)], [(2, 1), (3, 1)]]


def test_conflict_drops_member_with_higher_mean_score(caplog):
    # (2, 1) links to the track through image 3 only; the merge would put two image-2 ellipses together
    pms = [
        PairMatchSet(1, 2, [(0, 0, 0.001)]),
        PairMatchSet(1, 3, [(0, 0, 0.002)]),
        PairMatchSet(2, 3, [(1, 0, 0.05)]),
    ]
    with caplog.at_level(logging.INFO, logger="targetcal"):
        tracks = chain_tracks(pms, _dets())
    assert _members(tracks) == [[(1, 0), (2, 0), (3, 0)]]
    assert any("refused link" in r.getMessage() for r in caplog.records)


def test_better_rival_replaces_member(caplog):
    # (2, 0) is tied to one member, its rival (2, 1) to two; the rival has the lower mean score
    pms = [
        PairMatchSet(1, 2, [(0, 0, 0.001)]),
        PairMatchSet(1, 3, [(0, 0, 0.002)]),
        PairMatchSet(1, 4, [(0, 0, 0.002)]),
        PairMatchSet(2, 3, [(1, 0, 0.003)]),
        PairMatchSet(2, 4, [(1, 0, 0.003)]),
    ]
    with caplog.at_level(logging.INFO, logger="targetcal"):
        tracks = chain_tracks(pms, _dets())
    assert _members(tracks) == [[(1, 0), (2, 1), (3, 0), (4, 0)]]
    assert any("replaces" in r.getMessage() for r in caplog.records)


def test_chained_tracks_one_view_per_image(exact_scene):
    truth, rendered = exact_scene
    cams = _cams(truth)
    images = sorted(rendered.detections)[:6]
    pms = [match_pair(rendered.detections[i], rendered.detections[j], g, cams)
           for (i, j), g in sorted(pair_geometries_from_cameras(cams, images, 0.5).items())]
    tracks = chain_tracks(pms, rendered.detections)
    labels = label_map(rendered)
    for t in tracks:
        assert len(t.views) >= 2
        assert len({labels[(im, v.index)] for im, v in t.views.items()}) == 1


# -- verification ------------------------------------------------------------


def test_clean_tracks_unchanged(exact_scene):
    truth, rendered = exact_scene
    tracks = truth_tracks(truth, rendered)
    out = verify_tracks(tracks, _cams(truth), 0)
    assert [t.members() for t in out] == [t.members() for t in tracks]
    for t in out:
        assert np.linalg.norm(t.point - truth.circles[t.id].center) < 1e-6


def _swap_one_view(truth, rendered, links=frozenset()):
    tracks = truth_tracks(truth, rendered)
    t = max(tracks, key=lambda tr: len(tr.views))
    im = sorted(t.views)[1]
    other = next(u for u in truth.visible[im] if u != t.id)
    idx = next(lb.index for lb in rendered.labels if lb.image == im and lb.target == other)
    t.views[im] = TrackView(idx, rendered.detections[im][idx], truth.true_center(im, other), links=links)
    return t, im


def test_planted_wrong_view_pruned(exact_scene):
    truth, rendered = exact_scene
    t, im = _swap_one_view(truth, rendered)
    (out,) = verify_tracks([t], _cams(truth), 0)
    assert im not in out.views and len(out.views) == len(t.views) - 1
    assert np.linalg.norm(out.point - truth.circles[t.id].center) < 1e-6


def test_flagged_view_kept_on_pairwise_support(exact_scene):
    truth, rendered = exact_scene
    t, im = _swap_one_view(truth, rendered)
    t.views[im].links = frozenset(v for v in t.views if v != im)
    (out,) = verify_tracks([t], _cams(truth), 0)
    assert im in out.views


def test_short_tracks_dropped(exact_scene):
    truth, rendered = exact_scene
    t = truth_tracks(truth, rendered)[0]
    first = min(t.views)
    short = TargetTrack(t.id, {first: t.views[first]})
    assert verify_tracks([short], _cams(truth), 0) == []


# -- metrics -----------------------------------------------------------------


def test_metrics_arithmetic():
    m = metrics_from_counts(3, 1, 0, 6)
    assert m["precision"] == 0.75 and m["recall"] == 1.0 and m["accuracy"] == 0.9
    assert math.isclose(m["f_measure"], 6 / 7)


def test_metrics_undefined_denominator():
    m = metrics_from_counts(0, 0, 0, 5)
    assert m["precision"] is None and m["recall"] is None and m["f_measure"] is None
    assert m["accuracy"] == 1.0


def test_per_detection_counts():
    e = Ellipse(0.0, 0.0, 2.0, 1.0, 0.0)
    labels = {(0, 0): 1, (1, 0): 1, (2, 0): 1, (0, 1): 2, (1, 1): 2, (2, 1): None}
    a = TargetTrack(0, {0: TrackView(0, e), 1: TrackView(0, e), 2: TrackView(0, e)})
    b = TargetTrack(1, {0: TrackView(1, e), 2: TrackView(1, e)})
    c = count_outcomes([a, b], labels)
    assert (c.tp, c.fp, c.fn, c.tn) == (4, 1, 1, 0)


def test_perfect_prediction(exact_scene):
    truth, rendered = exact_scene
    m = matching_metrics(truth_tracks(truth, rendered), label_map(rendered))
    assert m["precision"] == m["recall"] == m["accuracy"] == m["f_measure"] == 1.0
