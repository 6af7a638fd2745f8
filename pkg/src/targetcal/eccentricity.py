"""Eccentricity correction of target centers from two-view cone intersection.

For each view of a matched target, the partner view with the best-conditioned
triangulation is chosen, the target plane is recovered from the degenerate
member of the cone pencil, and the plane section of the cone gives the 3D
circle center.  Its projection replaces the ellipse center.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .distortion import distort, undistort
from .errors import DegenerateGeometryError, InputError, NumericalError, ReconstructionError
from .geometry import Plane, Quadric, classify_conic, conic_center, conic_to_ellipse, convergence_angle, triangulate
from .matching import CameraSet, TargetTrack, ideal_ellipse, pencil_coefficients, view_cone
from .robust import triangulation_covariance

log = logging.getLogger(__name__)

MIN_CONVERGENCE_DEG = 20.0
ROOT_SEPARATION = 0.1
MAX_CHECK_VIEWS = 4  # extra views used to pick between the two candidate planes


@dataclass(frozen=True)
class ViewPairChoice:
    k: int
    l: int
    angle: float  # degrees
    det_cov: float


@dataclass(frozen=True, eq=False)
class ObjectConic:
    matrix: np.ndarray  # conic in the two free plane coordinates
    plane: Plane
    conic_class: str
    axes: tuple[int, int, int]  # (free u, free v, solved) object axes


def _pair_sigma(sigma, k, l) -> float:
    if isinstance(sigma, Mapping):
        key = (min(k, l), max(k, l))
        if key in sigma:
            return float(sigma[key])
        return float(np.median(list(sigma.values()))) if sigma else 1.0
    return float(sigma)


def select_best_partner(k: int, track: TargetTrack, cams: CameraSet, sigma=1.0, *,
                        min_angle: float = MIN_CONVERGENCE_DEG) -> ViewPairChoice | None:
    """Partner of view ``k`` with convergence above ``min_angle`` and the smallest covariance determinant.

    ``sigma`` is a single image noise value or a mapping from image pairs to
    their epipolar scale.  Returns ``None`` when no partner qualifies.
    """
    if k not in track.views:
        raise InputError(f"track {track.id} has no view in image {k}")
    if track.point is None:
        raise InputError(f"track {track.id} has no triangulated center")
    X = np.asarray(track.point, float)
    best = None
    for l in track.inlier_views():
        if l == k:
            continue
        try:
            ang = convergence_angle(cams.exteriors[k], cams.exteriors[l], X)
        except DegenerateGeometryError:
            continue
        if not ang > min_angle:
            continue
        s = max(_pair_sigma(sigma, k, l), 1e-12)
        try:
            cov = triangulation_covariance(cams.camera(k), cams.camera(l), X, s)
        except DegenerateGeometryError:
            continue
        d = float(np.linalg.det(cov))
        if best is None or d < best.det_cov:
            best = ViewPairChoice(k, l, ang, d)
    return best


def plane_pair(A, B) -> tuple[np.ndarray, np.ndarray, float]:
    """The two planes of the degenerate pencil member ``A + lam0 B``."""
    A = A.matrix if isinstance(A, Quadric) else np.asarray(A, float)
    B = B.matrix if isinstance(B, Quadric) else np.asarray(B, float)
    A = A / np.linalg.norm(A)
    B = B / np.linalg.norm(B)
    pencil = pencil_coefficients(A, B)
    lam0, sep = pencil.double_root()
    if not np.isfinite(lam0) or sep > ROOT_SEPARATION:
        raise ReconstructionError(f"no double root in the cone pencil (separation {sep:.3g})")
    Q = A + lam0 * B
    Q = 0.5 * (Q + Q.T)
    w, v = np.linalg.eigh(Q)
    order = np.argsort(-np.abs(w))
    w, v = w[order], v[:, order]
    if not (w[0] * w[1] < 0):
        raise ReconstructionError("degenerate pencil member is not a real plane pair")
    i_pos, i_neg = (0, 1) if w[0] > 0 else (1, 0)
    a = np.sqrt(w[i_pos]) * v[:, i_pos]
    b = np.sqrt(-w[i_neg]) * v[:, i_neg]
    return a + b, a - b, lam0


def intersect_cone_plane(A, T: Plane) -> tuple[ObjectConic, np.ndarray]:
    """Section of cone ``A`` by plane ``T`` and the 3D center of that section.

    The plane is solved for its dominant coordinate, the remaining two are the
    conic's free coordinates.
    """
    A = A.matrix if isinstance(A, Quadric) else np.asarray(A, float)
    t = np.asarray(T.coeffs if isinstance(T, Plane) else T, float)
    d = int(np.argmax(np.abs(t[:3])))
    if abs(t[d]) < 1e-12:
        raise DegenerateGeometryError("plane has no finite normal")
    u, v = [ax for ax in range(3) if ax != d]
    plane = T if isinstance(T, Plane) else Plane(t)
    # X = M @ (u, v, 1): free coordinates pass through, the solved one is linear
    M = _section_map(plane, (u, v, d))
    C = M.T @ A @ M
    C = 0.5 * (C + C.T)
    kind = classify_conic(C)
    try:
        uc, vc = conic_center(C)
    except DegenerateGeometryError:
        raise DegenerateGeometryError("plane section has no finite center") from None
    X = M @ np.array([uc, vc, 1.0])
    return ObjectConic(C, plane, kind, (u, v, d)), X[:3]


def _in_front(X, exterior) -> bool:
    return float(exterior.to_camera(X)[2]) > 0


def _section_map(T: Plane, axes) -> np.ndarray:
    t = T.coeffs
    u, v, d = axes
    M = np.zeros((4, 3))
    M[u, 0] = 1.0
    M[v, 1] = 1.0
    M[d] = [-t[u] / t[d], -t[v] / t[d], -t[3] / t[d]]
    M[3, 2] = 1.0
    return M


def section_roundness(oc: ObjectConic) -> float:
    """Minor/major axis ratio of a plane section measured in metric plane coordinates."""
    M = _section_map(oc.plane, oc.axes)
    G = M[:3, :2].T @ M[:3, :2]
    w = np.linalg.eigvals(np.linalg.solve(G, oc.matrix[:2, :2])).real
    if w[0] * w[1] <= 0:
        return 0.0
    return float(min(abs(w[0] / w[1]), abs(w[1] / w[0])))


def section_reprojection(oc: ObjectConic, views) -> float:
    """Summed ellipse-parameter misfit (pixels) of a plane section projected into ``views``.

    ``views`` holds ``(ideal Ellipse, InteriorParams, ExteriorParams)`` triples,
    the ellipse already freed of lens distortion.
    """
    M = _section_map(oc.plane, oc.axes)
    total = 0.0
    for e, interior, E in views:
        P = interior.pinhole().K @ np.hstack([E.rotation, -(E.rotation @ E.center)[:, None]])
        H = P @ M
        try:
            Hi = np.linalg.inv(H)
            proj = conic_to_ellipse(Hi.T @ oc.matrix @ Hi)
        except (np.linalg.LinAlgError, InputError, NumericalError):
            return np.inf
        total += float(np.hypot(proj.cx - e.cx, proj.cy - e.cy) + abs(proj.a - e.a) + abs(proj.b - e.b))
    return total


def reconstruct_plane(A_k, A_l, others=(), exteriors=None, reference=None) -> tuple[Plane, dict]:
    """Target plane from two cones of the same circle.

    Both members of the plane pair cut the two cones in one common conic, so
    the two generating views cannot tell them apart.  A candidate must give a
    real ellipse in front of the cameras (``exteriors``).  Among admissible
    candidates the one whose section best reprojects into the ``others``
    views wins; without further views the rounder section wins, then the
    plane passing closer to ``reference``.
    Returns the plane and a diagnostic dict with per-candidate scores.
    """
    p1, p2, lam0 = plane_pair(A_k, A_l)
    cands = []
    for p in (p1, p2):
        try:
            T = Plane(p)
            oc, X = intersect_cone_plane(A_k, T)
        except (InputError, NumericalError):
            continue
        ok = oc.conic_class == "ellipse"
        if ok and exteriors is not None:
            ok = all(_in_front(X, E) for E in exteriors)
        resid = section_reprojection(oc, others) if (ok and others) else np.nan
        dist = abs(float(T.distance(reference))) if reference is not None else np.nan
        cands.append({"plane": T, "ok": ok, "residual": resid, "roundness": section_roundness(oc) if ok else 0.0,
                      "distance": dist})
    good = [c for c in cands if c["ok"]]
    if not good:
        raise ReconstructionError("no admissible plane in the cone pencil")
    if others:
        good.sort(key=lambda c: c["residual"])
    elif len(good) > 1 and abs(good[0]["roundness"] - good[1]["roundness"]) > 1e-6:
        good.sort(key=lambda c: -c["roundness"])
    elif reference is not None:
        good.sort(key=lambda c: c["distance"])
    info = {"lambda": lam0, "candidates": cands}
    return good[0]["plane"], info


@dataclass
class CorrectionReport:
    corrected: int = 0
    no_partner: int = 0
    failed: int = 0


class _TrackCache:
    def __init__(self, track: TargetTrack, cams: CameraSet):
        self.track, self.cams = track, cams
        self._cones, self._ideal = {}, {}

    def cone(self, m):
        if m not in self._cones:
            self._cones[m] = view_cone(self.track.views[m].ellipse, self.cams.interior, self.cams.exteriors[m])
        return self._cones[m]

    def ideal(self, m):
        if m not in self._ideal:
            self._ideal[m] = ideal_ellipse(self.track.views[m].ellipse, self.cams.interior)
        return self._ideal[m]


def correct_view(track: TargetTrack, k: int, cams: CameraSet, sigma=1.0, *,
                 min_angle: float = MIN_CONVERGENCE_DEG,
                 cache: _TrackCache | None = None) -> tuple[np.ndarray | None, str, ViewPairChoice | None]:
    """Corrected observed-frame center of view ``k`` and a status string."""
    choice = select_best_partner(k, track, cams, sigma, min_angle=min_angle)
    if choice is None:
        return None, "no-partner", None
    l = choice.l
    cache = cache or _TrackCache(track, cams)
    try:
        A_k, A_l = cache.cone(k), cache.cone(l)
        rest = [m for m in track.inlier_views() if m not in (k, l)][:MAX_CHECK_VIEWS]
        others = [(cache.ideal(m), cams.interior, cams.exteriors[m]) for m in rest]
        T, _ = reconstruct_plane(A_k, A_l, others, (cams.exteriors[k], cams.exteriors[l]), track.point)
        _, X = intersect_cone_plane(A_k, T)
    except (NumericalError, InputError) as exc:
        log.debug("track %d view %d: correction failed: %s", track.id, k, exc)
        return None, "failed", choice
    E = cams.exteriors[k]
    Xc = E.to_camera(X)
    if Xc[2] <= 0:
        return None, "failed", choice
    K = cams.interior
    ideal = np.array([K.xp + K.c * Xc[0] / Xc[2], K.yp + K.c * Xc[1] / Xc[2]])
    return distort(K, ideal), "ok", choice


def correct_centers(tracks, cams: CameraSet, sigma=1.0, *, min_angle: float = MIN_CONVERGENCE_DEG,
                    report: CorrectionReport | None = None) -> list[TargetTrack]:
    """Eccentricity-corrected centers for every view, then re-triangulated 3D centers.

    Views without a qualifying partner, or whose reconstruction fails, keep
    their raw ellipse center and carry a status flag.
    """
    report = report if report is not None else CorrectionReport()
    out = []
    for t in tracks:
        if t.point is None or len(t.inlier_views()) < 2:
            out.append(t)
            continue
        views = {}
        cache = _TrackCache(t, cams)
        for k, tv in t.views.items():
            if not t.inlier.get(k, True):
                views[k] = tv
                continue
            c, status, _ = correct_view(t, k, cams, sigma, min_angle=min_angle, cache=cache)
            if status == "ok":
                report.corrected += 1
            elif status == "no-partner":
                report.no_partner += 1
            else:
                report.failed += 1
            views[k] = replace(tv, corrected=c, status=status)
        new = TargetTrack(t.id, views, t.point, dict(t.inlier))
        ins = new.inlier_views()
        xs = undistort(cams.interior, np.array([new.views[im].center for im in ins]))
        try:
            new.point = triangulate([(cams.camera(im), x) for im, x in zip(ins, xs)]).point
        except NumericalError:
            pass
        out.append(new)
    return out
