"""Target correspondence from the conic-pencil invariant and epipolar gating.

Two image ellipses of the same planar circle back-project to cones whose
pencil ``det(A + lam B)`` has a double root.  With both cones singular the
quartic reduces to ``lam (I2 lam^2 + I3 lam + I4)``, so a shared plane shows up
as a vanishing discriminant ``I3^2 - 4 I2 I4``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .distortion import undistort
from .errors import InputError, NumericalError
from .geometry import (
    Conic,
    Ellipse,
    ExteriorParams,
    InteriorParams,
    ProjectiveCamera,
    Quadric,
    ellipse_to_conic,
    triangulate,
)
from .robust import PairGeometry, robust_triangulate

log = logging.getLogger(__name__)

CHI2_P = 0.975
VERIFY_MIN_THRESHOLD = 1e-3  # pixels
MIN_LINK_SUPPORT = 2.0 / 3.0  # share of retained views that must vouch for a flagged view
MAX_SCORE = 0.2  # pencil scores of true matches stay far below this at sub-pixel noise
_LAMBDAS = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
_VANDERMONDE_INV = np.linalg.inv(np.vander(_LAMBDAS, 5))


def chi2_quantile_2dof(p: float = CHI2_P) -> float:
    if not 0 < p < 1:
        raise InputError(f"probability must lie in (0, 1), got {p}")
    return -2.0 * math.log(1.0 - p)


@dataclass(frozen=True)
class QuarticPencil:
    """Coefficients of ``det(A + lam B) = I1 lam^4 + I2 lam^3 + I3 lam^2 + I4 lam + I5``."""

    I: tuple[float, float, float, float, float]

    @property
    def delta(self) -> float:
        I1, I2, I3, I4, I5 = self.I
        return I3 * I3 - 4.0 * I2 * I4

    @property
    def score(self) -> float:
        """``|delta| / I3^2``: independent of the scale of either cone and of the object frame."""
        I3 = self.I[2]
        d = abs(self.delta)
        if I3 == 0.0:
            return d
        return d / (I3 * I3)

    def __call__(self, lam) -> np.ndarray:
        return np.polyval(np.array(self.I), lam)

    def double_root(self) -> tuple[float, float]:
        """Mean of the near-double root pair and its relative separation."""
        I1, I2, I3, I4, I5 = self.I
        if I2 == 0.0:
            raise NumericalError("pencil has no quadratic factor")
        lam0 = -I3 / (2.0 * I2)
        sep = math.sqrt(abs(self.delta)) / abs(I2) / max(abs(lam0), 1e-300)
        return lam0, sep


def _check_symmetric(M, name):
    M = M.matrix if isinstance(M, Quadric) else np.asarray(M, dtype=float)
    if M.shape != (4, 4):
        raise InputError(f"{name} must be 4x4")
    if np.max(np.abs(M - M.T)) > 1e-9 * max(1.0, np.max(np.abs(M))):
        raise InputError(f"{name} is not symmetric")
    return M


def pencil_coefficients(A, B) -> QuarticPencil:
    """Exact quartic coefficients by sampling the determinant at five points."""
    A = _check_symmetric(A, "A")
    B = _check_symmetric(B, "B")
    A = A / np.linalg.norm(A)
    B = B / np.linalg.norm(B)
    dets = np.linalg.det(A[None] + _LAMBDAS[:, None, None] * B[None])
    return QuarticPencil(tuple(float(v) for v in _VANDERMONDE_INV @ dets))


# ---------------------------------------------------------------------------
# Views, ideal ellipses and cones
# ---------------------------------------------------------------------------


def ideal_ellipse(e: Ellipse, interior: InteriorParams) -> Ellipse:
    """Shift an observed ellipse so its center is distortion-free; the shape is kept."""
    if not interior.has_distortion:
        return e
    c = undistort(interior, np.array([e.cx, e.cy]))
    return e.translated(float(c[0] - e.cx), float(c[1] - e.cy))


def normalized_camera(exterior: ExteriorParams) -> np.ndarray:
    P = np.hstack([exterior.rotation, -(exterior.rotation @ exterior.center)[:, None]])
    return P / np.linalg.norm(P)


def view_cone(e: Ellipse, interior: InteriorParams, exterior: ExteriorParams) -> Quadric:
    """Cone of object points imaging onto ``e``, built in normalized camera coordinates."""
    C = ellipse_to_conic(ideal_ellipse(e, interior)).matrix
    K = interior.pinhole().K
    Cn = Conic(K.T @ C @ K).matrix
    P = normalized_camera(exterior)
    A = P.T @ Cn @ P
    A = 0.5 * (A + A.T)
    return Quadric(A / np.linalg.norm(A))


@dataclass
class CameraSet:
    """Shared interior parameters plus per-image exterior orientation."""

    interior: InteriorParams
    exteriors: Mapping[int, ExteriorParams]

    def camera(self, image: int) -> ProjectiveCamera:
        if image not in self.exteriors:
            raise InputError(f"no camera for image {image}")
        return ProjectiveCamera.compose(self.interior.pinhole(), self.exteriors[image])

    def ideal_centers(self, ellipses: Sequence[Ellipse]) -> np.ndarray:
        if not ellipses:
            return np.zeros((0, 2))
        xy = np.array([[e.cx, e.cy] for e in ellipses])
        return undistort(self.interior, xy)


# ---------------------------------------------------------------------------
# Pairwise matching
# ---------------------------------------------------------------------------


@dataclass
class PairMatchSet:
    i: int
    j: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    ties: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        left = [m[0] for m in self.matches]
        right = [m[1] for m in self.matches]
        if len(set(left)) != len(left) or len(set(right)) != len(right):
            raise InputError("pair matches must be one-to-one")


def _components(edges: list[tuple[int, int]]):
    """Connected components of a bipartite edge list, as (left set, right set)."""
    parent: dict = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        for n in (("L", a), ("R", b)):
            parent.setdefault(n, n)
        ra, rb = find(("L", a)), find(("R", b))
        if ra != rb:
            parent[rb] = ra
    groups: dict = {}
    for n in parent:
        groups.setdefault(find(n), (set(), set()))[0 if n[0] == "L" else 1].add(n[1])
    return [groups[k] for k in sorted(groups, key=str)]


def match_pair(dets_i: Sequence[Ellipse], dets_j: Sequence[Ellipse], geom: PairGeometry | None,
               cams: CameraSet, *, chi2_p: float = CHI2_P, eccentricity_allowance: bool = True,
               max_score: float | None = MAX_SCORE, centers_i=None, centers_j=None) -> PairMatchSet:
    """Mutual-minimum pencil matching among epipolar-gated candidates of one image pair.

    ``centers_i``/``centers_j`` override the observed ellipse centers used for
    the gate (for example eccentricity-corrected centers); pixels, observed frame.
    """
    if geom is None:
        raise InputError("missing pair geometry for this image pair")
    i, j = geom.i, geom.j
    out = PairMatchSet(i, j)
    if not len(dets_i) or not len(dets_j):
        return out
    if centers_i is None:
        xi = cams.ideal_centers(dets_i)
    else:
        xi = undistort(cams.interior, np.asarray(centers_i, float))
    if centers_j is None:
        xj = cams.ideal_centers(dets_j)
    else:
        xj = undistort(cams.interior, np.asarray(centers_j, float))
    # D for every (k, l) combination
    h_i = np.column_stack([xi, np.ones(len(xi))])
    h_j = np.column_stack([xj, np.ones(len(xj))])
    F = geom.F
    l_j = h_i @ F.T  # epipolar lines in j of points of i
    l_i = h_j @ F  # epipolar lines in i of points of j
    alg = l_j @ h_j.T  # (ni, nj)
    n_j = np.hypot(l_j[:, 0], l_j[:, 1])[:, None]
    n_i = np.hypot(l_i[:, 0], l_i[:, 1])[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        D = np.sqrt((alg / n_j) ** 2 + (alg / n_i) ** 2)
    D = np.where(np.isfinite(D), D, np.inf)
    gate = geom.sigma * math.sqrt(chi2_quantile_2dof(chi2_p))
    gate = np.full(D.shape, gate)
    if eccentricity_allowance:
        # centers of image ellipses can sit off the projected circle center by up to ~a^2/c
        c = cams.interior.c
        ai = np.array([e.a for e in dets_i])[:, None]
        aj = np.array([e.a for e in dets_j])[None, :]
        gate = gate + (ai**2 + aj**2) / c
    cand = np.argwhere(D <= gate)
    if not len(cand):
        return out
    cones_i = {}
    cones_j = {}
    Ei, Ej = cams.exteriors[i], cams.exteriors[j]
    for left, right in _components([(int(a), int(b)) for a, b in cand]):
        left, right = sorted(left), sorted(right)
        for k in left:
            cones_i.setdefault(k, view_cone(dets_i[k], cams.interior, Ei))
        for m in right:
            cones_j.setdefault(m, view_cone(dets_j[m], cams.interior, Ej))
        S = np.array([[pencil_coefficients(cones_i[k], cones_j[m]).score for m in right] for k in left])
        for a, k in enumerate(left):
            row = S[a]
            b = int(np.argmin(row))
            col = S[:, b]
            if int(np.argmin(col)) != a or not D[k, right[b]] <= gate[k, right[b]]:
                continue
            if max_score is not None and row[b] > max_score:
                continue
            if np.sum(row == row[b]) > 1 or np.sum(col == col[a]) > 1:
                log.info("pair (%d, %d): tie in pencil score for ellipse %d; left unmatched", i, j, k)
                out.ties.append((k, right[b]))
                continue
            out.matches.append((k, right[b], float(row[b])))
    out.matches.sort()
    return out


# ---------------------------------------------------------------------------
# Tracks
# ---------------------------------------------------------------------------


@dataclass
class TrackView:
    index: int
    ellipse: Ellipse
    corrected: np.ndarray | None = None  # observed-frame pixels
    status: str = "raw"
    links: frozenset = frozenset()  # images whose track member is a pairwise match of this view

    @property
    def raw(self) -> np.ndarray:
        return np.array([self.ellipse.cx, self.ellipse.cy])

    @property
    def center(self) -> np.ndarray:
        return self.raw if self.corrected is None else np.asarray(self.corrected)


@dataclass
class TargetTrack:
    id: int
    views: dict[int, TrackView]
    point: np.ndarray | None = None
    inlier: dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.inlier:
            self.inlier = {im: True for im in self.views}

    def inlier_views(self) -> list[int]:
        return [im for im in sorted(self.views) if self.inlier.get(im, True)]

    def members(self) -> set[tuple[int, int]]:
        return {(im, v.index) for im, v in self.views.items() if self.inlier.get(im, True)}


def _mean_link(node, members, adj, ceiling):
    others = [m for m in members if m[0] != node[0]]
    if not others:
        return ceiling
    return float(np.mean([adj[node].get(m, ceiling) for m in others]))


def _split_connected(members, adj):
    left = set(members)
    parts = []
    while left:
        stack = [min(left)]
        part = set()
        while stack:
            n = stack.pop()
            if n in part:
                continue
            part.add(n)
            stack.extend(m for m in adj[n] if m in left and m not in part)
        left -= part
        parts.append(part)
    return parts


def chain_tracks(pair_matches: Sequence[PairMatchSet], detections: Mapping[int, Sequence[Ellipse]], *,
                 max_score: float = MAX_SCORE) -> list[TargetTrack]:
    """Union-find chaining of pairwise matches into multi-view tracks.

    Edges are merged in order of increasing pencil score and a merge that
    would put two ellipses of one image in the same track is refused (and
    logged), so a weak spurious link cannot fuse two targets.  Afterwards an
    unattached ellipse linked to a track competes with that track's member in
    its image; the one with the larger mean score over the track's other
    members (missing links count as ``max_score``) is dropped.
    """
    edges = []
    adj: dict = {}
    for pm in pair_matches:
        for k, m, s in pm.matches:
            a, b = (pm.i, k), (pm.j, m)
            edges.append((float(s), a, b))
            adj.setdefault(a, {})[b] = float(s)
            adj.setdefault(b, {})[a] = float(s)
    edges.sort()
    parent: dict = {}
    images: dict = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, a, b in edges:
        for n in (a, b):
            if n not in parent:
                parent[n] = n
                images[n] = {n[0]}
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if images[ra] & images[rb]:
            log.info("refused link %s-%s (score %.3g): both tracks already use image(s) %s",
                     a, b, s, sorted(images[ra] & images[rb]))
            continue
        root, child = min(ra, rb), max(ra, rb)
        parent[child] = root
        images[root] |= images.pop(child)
    comps: dict = {}
    for n in sorted(parent):
        comps.setdefault(find(n), set()).add(n)
    loose = {n for c in comps.values() if len(c) == 1 for n in c}

    groups = []
    for root in sorted(comps):
        members = comps[root]
        if len(members) < 2:
            continue
        by_image = {n[0]: n for n in members}
        changed = False
        for im in sorted(by_image):
            rivals = sorted(n for n in loose if n[0] == im and any(m in members for m in adj[n]))
            if not rivals:
                continue
            cur = by_image[im]
            best, best_score = cur, _mean_link(cur, members, adj, max_score)
            for n in rivals:
                sc = _mean_link(n, members, adj, max_score)
                if sc < best_score:
                    best, best_score = n, sc
            if best != cur:
                log.info("image %d: %s replaces %s in a track (mean score %.3g)", im, best, cur, best_score)
                members.discard(cur)
                members.add(best)
                loose.discard(best)
                loose.add(cur)
                by_image[im] = best
                changed = True
        groups.extend(_split_connected(members, adj) if changed else [members])

    tracks = []
    for g in sorted(groups, key=min):
        if len(g) < 2:
            continue
        views = {im: TrackView(k, detections[im][k], links=frozenset(n[0] for n in adj[(im, k)] if n in g))
                 for im, k in sorted(g)}
        tracks.append(TargetTrack(len(tracks), views))
    return tracks


def verify_tracks(tracks: Sequence[TargetTrack], cams: CameraSet, seed=0, *,
                  inlier_multiplier: float = 2.5, min_threshold: float = VERIFY_MIN_THRESHOLD,
                  min_support: float = MIN_LINK_SUPPORT) -> list[TargetTrack]:
    """Robust triangulation per track; outlying views are removed and short tracks dropped.

    A view flagged by the triangulation is kept when it is a pairwise match of
    at least ``min_support`` of the retained views (and of two or more): the
    pencil test then vouches for it and the large residual is a noise tail.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    out = []
    for t in tracks:
        views = t.inlier_views()
        if len(views) < 2:
            continue
        xs = undistort(cams.interior, np.array([t.views[im].center for im in views]))
        try:
            rt = robust_triangulate([(cams.camera(im), x) for im, x in zip(views, xs)], rng,
                                    inlier_multiplier=inlier_multiplier, min_threshold=min_threshold)
        except NumericalError as exc:
            log.info("track %d dropped: %s", t.id, exc)
            continue
        flags = dict(zip(views, np.asarray(rt.inliers, bool)))
        core = {im for im, ok in flags.items() if ok}
        for im in views:
            if not flags[im]:
                support = len(t.views[im].links & core)
                if support >= 2 and support >= min_support * len(core):
                    flags[im] = True
                    log.debug("track %d: view %d kept on pairwise support %d/%d", t.id, im, support, len(core))
                else:
                    log.debug("track %d: view %d removed by triangulation", t.id, im)
        keep = {im: t.views[im] for im in views if flags[im]}
        if len(keep) < 2:
            continue
        if len(keep) > len(core):
            ins = sorted(keep)
            xs = undistort(cams.interior, np.array([keep[im].center for im in ins]))
            try:
                rt = triangulate([(cams.camera(im), x) for im, x in zip(ins, xs)])
            except NumericalError:
                pass
        out.append(TargetTrack(t.id, keep, np.asarray(rt.point), {im: True for im in keep}))
    return out


def track_noise_scale(tracks: Sequence[TargetTrack], cams: CameraSet) -> float:
    """Pooled per-coordinate image noise from least-squares triangulation of every track's inlier views."""
    ss, dof = 0.0, 0
    for t in tracks:
        views = t.inlier_views()
        if len(views) < 2:
            continue
        xs = undistort(cams.interior, np.array([t.views[im].center for im in views]))
        try:
            X = triangulate([(cams.camera(im), x) for im, x in zip(views, xs)]).point
        except NumericalError:
            continue
        for im, x in zip(views, xs):
            h = cams.camera(im).P @ np.append(X, 1.0)
            if h[2] <= 0:
                continue
            ss += float(np.sum((h[:2] / h[2] - x) ** 2))
        dof += 2 * len(views) - 3
    return float(np.sqrt(ss / dof)) if dof > 0 else float("nan")


def track_signature(tracks: Sequence[TargetTrack]) -> frozenset:
    return frozenset(frozenset(t.members()) for t in tracks)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MatchCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def _ratio(a, b):
    return a / b if b else None


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> dict:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    accuracy = _ratio(tp + tn, tp + tn + fp + fn)
    if precision is None or recall is None or precision + recall == 0:
        f = None
    else:
        f = 2 * precision * recall / (precision + recall)
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn, "precision": precision, "recall": recall,
            "accuracy": accuracy, "f_measure": f}


def count_outcomes(predicted: Sequence[TargetTrack], labels: Mapping[tuple[int, int], int | None]) -> MatchCounts:
    """Per-detection outcome counts.

    A detection assigned to a track is a true positive when it is a real
    target and the track holds the largest share of that target's
    detections; every other assigned detection is a false positive.  An
    unassigned detection is a false negative when its target was seen in at
    least two images, otherwise a true negative.
    """
    assigned: dict[tuple[int, int], int] = {}
    for t in predicted:
        for key in t.members():
            assigned[key] = t.id
    per_target: dict = {}
    for key, tid in assigned.items():
        target = labels.get(key)
        if target is not None:
            per_target.setdefault(target, {}).setdefault(tid, 0)
            per_target[target][tid] += 1
    owner = {tg: max(sorted(c), key=lambda k: c[k]) for tg, c in per_target.items()}
    seen: dict = {}
    for (im, _), target in labels.items():
        if target is not None:
            seen.setdefault(target, set()).add(im)
    tp = fp = fn = tn = 0
    for key, target in labels.items():
        if key in assigned:
            if target is not None and owner.get(target) == assigned[key]:
                tp += 1
            else:
                fp += 1
        elif target is not None and len(seen[target]) >= 2:
            fn += 1
        else:
            tn += 1
    for key in assigned:
        if key not in labels:
            fp += 1
    return MatchCounts(tp, fp, fn, tn)


def matching_metrics(predicted: Sequence[TargetTrack], ground_truth: Mapping[tuple[int, int], int | None]) -> dict:
    c = count_outcomes(predicted, ground_truth)
    return metrics_from_counts(c.tp, c.fp, c.fn, c.tn)
