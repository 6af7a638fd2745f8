"""The full calibration loop: refine, match, correct, adjust, repeat."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .bundle import CalibrationSolution, NetworkState, Observation, ObservationSet, bundle_adjust_free
from .eccentricity import MIN_CONVERGENCE_DEG, CorrectionReport, correct_centers
from .errors import InputError, NumericalError
from .geometry import Ellipse, ExteriorParams, InteriorParams
from .matching import (
    CHI2_P,
    CameraSet,
    PairMatchSet,
    TargetTrack,
    chain_tracks,
    match_pair,
    track_noise_scale,
    track_signature,
    verify_tracks,
)
from .robust import FeatureTrack, PairGeometry, fundamental_from_cameras, refine_cameras, robust_triangulate
from .distortion import undistort
from .selection import TermSelection, select_distortion_terms

log = logging.getLogger(__name__)

MIN_IMAGE_POINTS = 3
MIN_SIGMA = 1e-6  # pixels; keeps weights finite on exact data


@dataclass
class PipelineOptions:
    seed: int = 0
    chi2_p: float = CHI2_P
    min_convergence_deg: float = MIN_CONVERGENCE_DEG
    max_outer_iters: int = 10
    inlier_multiplier: float = 2.5
    distortion_terms: int | str = "auto"
    refine_terms: int = 2  # radial terms used while refining cameras when the count is automatic
    correct: bool = True
    verify: bool = True
    default_sigma: float = 1.0

    def __post_init__(self):
        if self.distortion_terms != "auto":
            n = int(self.distortion_terms)
            if not 0 <= n <= 5:
                raise InputError("distortion terms must be 'auto' or an integer in 0..5")
            self.distortion_terms = n
        if self.max_outer_iters < 1:
            raise InputError("max outer iterations must be at least 1")
        if not 0 < self.chi2_p < 1:
            raise InputError("chi-square probability must lie in (0, 1)")


@dataclass
class IterationRecord:
    iteration: int
    n_tracks: int
    n_observations: int
    rmse: float
    c: float
    n_radial: int
    corrected: int
    uncorrected: int
    sigma: float  # a-priori image noise used for the observation weights


@dataclass
class PipelineResult:
    solution: CalibrationSolution
    tracks: list[TargetTrack]
    pairs: dict[tuple[int, int], PairGeometry]
    iterations: int
    converged: bool
    history: list[IterationRecord] = field(default_factory=list)
    selection: TermSelection | None = None


def pair_geometries_from_cameras(cams: CameraSet, images: Sequence[int], sigma: Mapping | float
                                 ) -> dict[tuple[int, int], PairGeometry]:
    """Fundamental matrices implied by the current cameras, keeping each pair's noise scale."""
    out = {}
    default = float(np.median(list(sigma.values()))) if isinstance(sigma, Mapping) and sigma else 1.0
    for i, j in combinations(sorted(images), 2):
        s = sigma.get((i, j), default) if isinstance(sigma, Mapping) else float(sigma)
        F = fundamental_from_cameras(cams.camera(i), cams.camera(j))
        out[(i, j)] = PairGeometry(i, j, F, s)
    return out


def match_all(detections: Mapping[int, Sequence[Ellipse]], pairs: Mapping[tuple[int, int], PairGeometry],
              cams: CameraSet, *, chi2_p: float = CHI2_P) -> list[PairMatchSet]:
    out = []
    for (i, j) in sorted(pairs):
        if i not in detections or j not in detections:
            continue
        out.append(match_pair(detections[i], detections[j], pairs[(i, j)], cams, chi2_p=chi2_p))
    return out


def preliminary_points(tracks: Sequence[TargetTrack], cams: CameraSet, rng) -> list[TargetTrack]:
    """Robust 3D centers from raw ellipse centers; every view is kept for correction."""
    out = []
    for t in tracks:
        views = t.inlier_views()
        xs = undistort(cams.interior, np.array([t.views[im].raw for im in views]))
        try:
            rt = robust_triangulate([(cams.camera(im), x) for im, x in zip(views, xs)], rng,
                                    min_threshold=1e-3)
        except NumericalError:
            continue
        out.append(TargetTrack(t.id, dict(t.views), np.asarray(rt.point), dict(t.inlier)))
    return out


def stage_rng(seed: int, iteration: int) -> np.random.Generator:
    """Generator for one outer iteration, so standalone stages reproduce the loop."""
    return np.random.default_rng([int(seed), int(iteration)])


def initial_pairs(cams: CameraSet, images: Sequence[int], pairs: Mapping[tuple[int, int], PairGeometry]
                  ) -> dict[tuple[int, int], PairGeometry]:
    """Estimated pair geometry where available, the cameras' own epipolar geometry elsewhere."""
    sigma = {k: g.sigma for k, g in pairs.items()}
    geo = pair_geometries_from_cameras(cams, images, sigma)
    geo.update(pairs)
    return geo


def match_stage(detections, pairs, cams: CameraSet, opts: PipelineOptions
                ) -> tuple[list[PairMatchSet], list[TargetTrack]]:
    """Pairwise matching of every image pair and chaining into tracks."""
    pms = match_all(detections, pairs, cams, chi2_p=opts.chi2_p)
    return pms, chain_tracks(pms, detections)


def correct_stage(tracks, pairs, cams: CameraSet, opts: PipelineOptions, rng,
                  report: CorrectionReport | None = None) -> list[TargetTrack]:
    """Eccentricity correction of chained tracks, then robust verification."""
    sigma = {k: g.sigma for k, g in pairs.items()}
    if opts.correct:
        tracks = preliminary_points(tracks, cams, rng)
        tracks = correct_centers(tracks, cams, sigma, min_angle=opts.min_convergence_deg, report=report)
    if opts.verify:
        tracks = verify_tracks(tracks, cams, rng, inlier_multiplier=opts.inlier_multiplier)
    return tracks


def match_and_correct(detections, pairs, cams: CameraSet, opts: PipelineOptions, rng,
                      report: CorrectionReport | None = None) -> list[TargetTrack]:
    """Pairwise matching, chaining, eccentricity correction and robust verification."""
    _, tracks = match_stage(detections, pairs, cams, opts)
    return correct_stage(tracks, pairs, cams, opts, rng, report)


def refine_stage(features, interior: InteriorParams, exteriors, opts: PipelineOptions):
    """Camera refinement on feature tracks with the radial terms the options call for."""
    n_ref = opts.refine_terms if opts.distortion_terms == "auto" else opts.distortion_terms
    return refine_cameras(features, interior.with_terms(max(n_ref, interior.n_radial)), exteriors,
                          np.random.default_rng(opts.seed), inlier_multiplier=opts.inlier_multiplier)


def observations_from_tracks(tracks: Sequence[TargetTrack], weight: float = 1.0) -> list[Observation]:
    recs = []
    for t in tracks:
        for im in t.inlier_views():
            x, y = t.views[im].center
            recs.append(Observation(im, t.id, float(x), float(y), weight))
    return recs


def _track_points(tracks, cams):
    from .geometry import triangulate

    pts = {}
    for t in tracks:
        if t.point is not None:
            pts[t.id] = np.asarray(t.point, float)
            continue
        views = t.inlier_views()
        xs = undistort(cams.interior, np.array([t.views[im].center for im in views]))
        pts[t.id] = triangulate([(cams.camera(im), x) for im, x in zip(views, xs)]).point
    return pts


def adjust(tracks, interior: InteriorParams, exteriors, opts: PipelineOptions, sigma: float = 1.0):
    """Self-calibrating adjustment of the tracks with weights ``1 / sigma**2``."""
    cams = CameraSet(interior, exteriors)
    pts = _track_points(tracks, cams)
    recs = []
    for r in observations_from_tracks(tracks, 1.0 / sigma**2):
        if exteriors[r.image].to_camera(pts[r.target])[2] > 0:
            recs.append(r)
        else:
            log.warning("image %d, track %d: point behind the camera, observation left out", r.image, r.target)
    # a point needs two rays and a camera three points, otherwise the network is underdetermined
    while True:
        per_point = Counter(r.target for r in recs)
        per_image = Counter(r.image for r in recs)
        kept = [r for r in recs if per_point[r.target] >= 2 and per_image[r.image] >= MIN_IMAGE_POINTS]
        if len(kept) == len(recs):
            break
        recs = kept
    if not recs:
        raise NumericalError("no observations left for the adjustment")
    obs = ObservationSet.from_records(recs)
    used = sorted({r.image for r in recs})
    pts = {k: pts[k] for k in sorted({r.target for r in recs})}
    ext = {i: exteriors[i] for i in used}
    selection = None
    if opts.distortion_terms == "auto":
        base = bundle_adjust_free(obs, NetworkState(interior.with_terms(0), ext, pts))
        selection = select_distortion_terms(obs, base)
        sol = selection.solution
    else:
        sol = bundle_adjust_free(obs, NetworkState(interior.with_terms(opts.distortion_terms), ext, pts))
    return sol, selection


def calibrate_pipeline(detections: Mapping[int, Sequence[Ellipse]], interior: InteriorParams,
                       exteriors: Mapping[int, ExteriorParams], options: PipelineOptions | None = None,
                       features: Sequence[FeatureTrack] | None = None,
                       pairs: Mapping[tuple[int, int], PairGeometry] | None = None) -> PipelineResult:
    """Iterate matching, center correction and self-calibration until the match set settles.

    Pair geometry comes from ``pairs`` if given, otherwise from refining the
    cameras on ``features``; one of the two is required.
    """
    opts = options or PipelineOptions()
    images = sorted(detections)
    if len(images) < 2:
        raise InputError("calibration needs at least 2 images")
    missing = [i for i in images if i not in exteriors]
    if missing:
        raise InputError(f"no initial camera for image(s) {missing}")
    exteriors = dict(exteriors)
    if pairs is None:
        if not features:
            raise InputError("either feature tracks or pair geometry is required")
        ref = refine_stage(features, interior, exteriors, opts)
        interior, pairs = ref.interior, ref.pairs
        exteriors.update(ref.exteriors)
    pairs = dict(pairs)
    sigma = {k: g.sigma for k, g in pairs.items()}

    history = []
    prev = None
    solution = None
    selection = None
    tracks: list[TargetTrack] = []
    converged = False
    it = 0
    for it in range(1, opts.max_outer_iters + 1):
        cams = CameraSet(interior, exteriors)
        pairs = pair_geometries_from_cameras(cams, images, sigma) if it > 1 else initial_pairs(cams, images, pairs)
        report = CorrectionReport()
        tracks = match_and_correct(detections, pairs, cams, opts, stage_rng(opts.seed, it), report)
        if not tracks:
            if it == 1:
                raise NumericalError("no target matches found")
            break
        sig = track_signature(tracks)
        noise = track_noise_scale(tracks, cams)
        noise = max(noise, MIN_SIGMA) if np.isfinite(noise) else opts.default_sigma
        solution, selection = adjust(tracks, interior, exteriors, opts, noise)
        interior = solution.interior
        exteriors.update(solution.exteriors)
        history.append(IterationRecord(it, len(tracks), int(np.sum(solution.observations.weight > 0)),
                                       solution.rmse, interior.c, interior.n_radial,
                                       report.corrected, report.no_partner + report.failed, noise))
        log.info("outer iteration %d: %d tracks, rmse %.4f px, c %.4f", it, len(tracks), solution.rmse,
                 interior.c)
        if sig == prev:
            converged = True
            break
        prev = sig
    if not converged:
        log.warning("outer loop stopped at the iteration cap (%d) with the match set still changing",
                    opts.max_outer_iters)
    for t in tracks:
        if t.id in solution.points:
            t.point = np.asarray(solution.points[t.id])
    return PipelineResult(solution, tracks, pairs, it, converged, history, selection)
