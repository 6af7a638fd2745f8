"""Least-median-of-squares estimators and camera refinement from feature tracks.

All randomized routines take a seed (or a ``numpy.random.Generator``) and are
deterministic for a fixed seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InputError, InsufficientDataError, NumericalError
from .geometry import ExteriorParams, InteriorParams, ProjectiveCamera, triangulate
from .distortion import undistort

log = logging.getLogger(__name__)

ROBUST_SCALE = 1.4826
INLIER_MULTIPLIER = 2.5
MIN_THRESHOLD = 1e-6  # pixels; keeps round-off from flagging exact inliers
OUTLIER_FRACTION = 0.5
MAX_SUBSAMPLES = 2000
BUCKET_GRID = 8


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def n_subsamples(p: int, outlier_fraction: float = OUTLIER_FRACTION, confidence: float = 0.99,
                 cap: int = MAX_SUBSAMPLES) -> int:
    good = (1 - outlier_fraction) ** p
    if good >= 1:
        return 1
    return min(cap, math.ceil(math.log(1 - confidence) / math.log(1 - good)))


def robust_scale(sq_residuals: np.ndarray, p: int) -> float:
    n = len(sq_residuals)
    factor = 1 + 5 / (n - p) if n > p else 1.0
    return float(ROBUST_SCALE * factor * math.sqrt(np.median(sq_residuals)))


def reweighted_scale(residuals: np.ndarray, inliers: np.ndarray, p: int) -> float:
    """Second-step scale ``sqrt(sum r^2 / (n_in - p))`` over the current inliers."""
    r = residuals[inliers]
    dof = len(r) - p
    if dof <= 0:
        return float(np.sqrt(np.mean(r * r))) if len(r) else 0.0
    return float(np.sqrt(np.sum(r * r) / dof))


@dataclass
class LMedSResult:
    model: object
    inliers: np.ndarray
    sigma: float
    residuals: np.ndarray
    median_sq: float
    n_samples: int


# ---------------------------------------------------------------------------
# Model kinds
# ---------------------------------------------------------------------------


def hartley_normalization(x: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = x.mean(axis=0)
    d = np.mean(np.linalg.norm(x - c, axis=1))
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _homog(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _eight_point_rows(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            x2[..., 0] * x1[..., 0], x2[..., 0] * x1[..., 1], x2[..., 0],
            x2[..., 1] * x1[..., 0], x2[..., 1] * x1[..., 1], x2[..., 1],
            x1[..., 0], x1[..., 1], np.ones_like(x1[..., 0]),
        ],
        axis=-1,
    )


def _enforce_rank2(F: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(F)
    s[..., 2] = 0
    return u @ (s[..., :, None] * vt)


def normalize_fundamental(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    i = np.argmax(np.abs(F))
    return F * np.sign(F.flat[i])


def epipolar_distances(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Symmetric epipolar distance for a batch of models ``(..., 3, 3)`` and point sets."""
    h1 = _homog(x1)
    h2 = _homog(x2)
    l2 = np.einsum("...ij,nj->...ni", F, h1)
    l1 = np.einsum("...ji,nj->...ni", F, h2)
    alg = np.einsum("...ni,ni->...n", l2, h2)
    n2 = np.hypot(l2[..., 0], l2[..., 1])
    n1 = np.hypot(l1[..., 0], l1[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt((alg / n2) ** 2 + (alg / n1) ** 2)
    return np.where(np.isfinite(d), d, np.inf)


def epipolar_distance(F, x, x_prime) -> float:
    """``sqrt(d(x', F x)^2 + d(x, F^T x')^2)`` in pixels."""
    F = np.asarray(F, dtype=float)
    h = _homog(np.asarray(x, float).reshape(-1)[:2])
    hp = _homog(np.asarray(x_prime, float).reshape(-1)[:2])
    l2 = F @ h
    l1 = F.T @ hp
    n2, n1 = np.hypot(*l2[:2]), np.hypot(*l1[:2])
    if n2 < 1e-300 or n1 < 1e-300:
        raise DegenerateGeometryError("degenerate epipolar line")
    alg = hp @ l2
    return float(math.sqrt((alg / n2) ** 2 + (alg / n1) ** 2))


def sampson_distances(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1, h2 = _homog(x1), _homog(x2)
    l2 = h1 @ F.T
    l1 = h2 @ F
    alg = np.sum(l2 * h2, axis=1)
    return np.abs(alg) / np.sqrt(l2[:, 0] ** 2 + l2[:, 1] ** 2 + l1[:, 0] ** 2 + l1[:, 1] ** 2)


class FundamentalModel:
    """Normalized eight-point fundamental matrix, scored by symmetric epipolar distance."""

    sample_size = 8

    def __init__(self, x1, x2, grid: int = BUCKET_GRID):
        self.x1 = np.asarray(x1, dtype=float)
        self.x2 = np.asarray(x2, dtype=float)
        if len(self.x1) != len(self.x2):
            raise InputError("point sets differ in length")
        self.n = len(self.x1)
        self.T1 = hartley_normalization(self.x1)
        self.T2 = hartley_normalization(self.x2)
        self.n1 = (self.x1 @ self.T1[:2, :2].T) + self.T1[:2, 2]
        self.n2 = (self.x2 @ self.T2[:2, :2].T) + self.T2[:2, 2]
        self.grid = grid

    def fit(self, samples: np.ndarray):
        A = _eight_point_rows(self.n1[samples], self.n2[samples])  # (N, 8, 9)
        _, s, vt = np.linalg.svd(A)
        valid = s[:, 7] > 1e-10 * s[:, 0]
        Fn = _enforce_rank2(vt[:, -1].reshape(-1, 3, 3))
        F = self.T2.T @ Fn @ self.T1
        return F, valid

    def residuals(self, F: np.ndarray) -> np.ndarray:
        return epipolar_distances(F, self.x1, self.x2)

    def refit(self, mask: np.ndarray):
        if mask.sum() < 8:
            return None
        A = _eight_point_rows(self.n1[mask], self.n2[mask])
        _, s, vt = np.linalg.svd(A)
        if s[7] <= 1e-10 * s[0]:
            return None
        return self.T2.T @ _enforce_rank2(vt[-1].reshape(3, 3)) @ self.T1

    def sample(self, rng: np.random.Generator, n_samples: int) -> np.ndarray:
        """Bucketed minimal samples: distinct buckets drawn with probability ∝ occupancy."""
        p = self.sample_size
        lo = self.x1.min(axis=0)
        span = np.maximum(self.x1.max(axis=0) - lo, 1e-12)
        cell = np.minimum((self.grid * (self.x1 - lo) / span).astype(int), self.grid - 1)
        bucket = cell[:, 1] * self.grid + cell[:, 0]
        order = np.argsort(bucket, kind="stable")
        ids, start, counts = np.unique(bucket[order], return_index=True, return_counts=True)
        if len(ids) < p:
            keys = rng.random((n_samples, self.n))
            return np.argpartition(keys, p - 1, axis=1)[:, :p]
        gumbel = np.log(counts)[None, :] - np.log(-np.log(rng.random((n_samples, len(ids)))))
        chosen = np.argpartition(-gumbel, p - 1, axis=1)[:, :p]
        offs = (rng.random((n_samples, p)) * counts[chosen]).astype(int)
        return order[start[chosen] + offs]


class PointModel:
    """Two-view DLT point hypotheses scored by reprojection distance in every view."""

    sample_size = 2

    def __init__(self, cameras: Sequence[np.ndarray], points: np.ndarray):
        self.P = np.array([c / np.linalg.norm(c) for c in cameras])
        self.x = np.asarray(points, dtype=float)
        self.n = len(self.x)
        self.sign = np.sign(np.linalg.det(self.P[:, :, :3]))

    def fit(self, samples: np.ndarray):
        N = len(samples)
        P = self.P[samples]  # (N, 2, 3, 4)
        x = self.x[samples]  # (N, 2, 2)
        rows = np.concatenate(
            [x[..., 0:1, None] * P[:, :, 2:3, :] - P[:, :, 0:1, :],
             x[..., 1:2, None] * P[:, :, 2:3, :] - P[:, :, 1:2, :]],
            axis=2,
        ).reshape(N, 4, 4)
        rows /= np.linalg.norm(rows, axis=2, keepdims=True)
        _, s, vt = np.linalg.svd(rows)
        Xh = vt[:, -1]
        valid = (s[:, 2] > 1e-8 * s[:, 0]) & (np.abs(Xh[:, 3]) > 1e-8 * np.linalg.norm(Xh[:, :3], axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            X = Xh[:, :3] / Xh[:, 3:4]
        return X, valid & np.all(np.isfinite(X), axis=1)

    def residuals(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        h = np.einsum("vij,nj->nvi", self.P, _homog(X))
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = h[..., :2] / h[..., 2:3]
            r = np.linalg.norm(proj - self.x[None], axis=-1)
        behind = h[..., 2] * self.sign[None, :] <= 0
        r[behind | ~np.isfinite(r)] = np.inf
        return r

    def refit(self, mask: np.ndarray):
        if mask.sum() < 2:
            return None
        try:
            return triangulate([(P, x) for P, x in zip(self.P[mask], self.x[mask])]).point
        except DegenerateGeometryError:
            return None


class Line2DModel:
    """2D line through two points; residual is orthogonal distance (engine self-test model)."""

    sample_size = 2

    def __init__(self, points):
        self.x = np.asarray(points, dtype=float)
        self.n = len(self.x)

    def fit(self, samples):
        a, b = self.x[samples[:, 0]], self.x[samples[:, 1]]
        d = b - a
        nrm = np.stack([-d[:, 1], d[:, 0]], axis=1)
        ln = np.linalg.norm(nrm, axis=1)
        valid = ln > 1e-12
        nrm = nrm / np.where(valid, ln, 1)[:, None]
        lines = np.column_stack([nrm, -np.sum(nrm * a, axis=1)])
        return lines, valid

    def residuals(self, lines):
        return np.abs(_homog(self.x) @ np.atleast_2d(lines).T).T

    def refit(self, mask):
        pts = self.x[mask]
        if len(pts) < 2:
            return None
        c = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - c)
        nrm = vt[-1]
        return np.array([nrm[0], nrm[1], -nrm @ c])


MODEL_KINDS = {"fundamental": FundamentalModel, "point": PointModel, "line": Line2DModel}


def lmeds_estimate(
    model_kind,
    data,
    seed=0,
    *,
    outlier_fraction: float = OUTLIER_FRACTION,
    max_samples: int = MAX_SUBSAMPLES,
    inlier_multiplier: float = INLIER_MULTIPLIER,
    min_threshold: float = MIN_THRESHOLD,
    refit: bool | str = True,
) -> LMedSResult:
    """Least-median-of-squares estimate over minimal subsets.

    ``model_kind`` is a key of :data:`MODEL_KINDS` (``data`` is then the
    constructor arguments) or an already-built model object.  With
    ``refit=True`` the model is refitted to its inliers and the inlier set
    re-thresholded with the reweighted scale until it settles; ``"once"``
    does a single least-squares refit on the LMedS inliers and keeps the
    LMedS scale and inlier set; ``False`` returns the best minimal-subset model.
    """
    if isinstance(model_kind, str):
        try:
            cls = MODEL_KINDS[model_kind]
        except KeyError:
            raise InputError(f"unknown model kind {model_kind!r}") from None
        model = cls(*data) if isinstance(data, tuple) else cls(data)
    else:
        model = model_kind
    p, n = model.sample_size, model.n
    if n < p:
        raise InsufficientDataError(f"need at least {p} data points, got {n}")
    rng = _rng(seed)
    count = n_subsamples(p, outlier_fraction, cap=max_samples)
    if math.comb(n, p) <= count:
        samples = np.array(list(combinations(range(n), p)), dtype=int)
    elif hasattr(model, "sample"):
        samples = model.sample(rng, count)
    else:
        samples = np.argpartition(rng.random((count, n)), p - 1, axis=1)[:, :p]
    models, valid = model.fit(samples)
    if not valid.any():
        raise NumericalError("all minimal subsets are degenerate")
    best, best_med = None, np.inf
    idx = np.flatnonzero(valid)
    for chunk in np.array_split(idx, max(1, len(idx) // 256)):
        r = model.residuals(models[chunk])
        med = np.median(r * r, axis=1)
        k = int(np.argmin(med))
        if med[k] < best_med:
            best_med, best = float(med[k]), models[chunk[k]]
    r = model.residuals(best[None] if np.ndim(best) else best)[0]
    sigma = robust_scale(r * r, p)
    inliers = r <= max(inlier_multiplier * sigma, min_threshold)
    if refit == "once" and hasattr(model, "refit"):
        m2 = model.refit(inliers) if inliers.sum() >= p else None
        if m2 is not None:
            best = m2
            r = model.residuals(np.asarray(m2)[None])[0]
    elif refit and hasattr(model, "refit"):
        # reweighted refits on the inlier set until it stops changing
        for _ in range(10):
            if inliers.sum() < p:
                break
            m2 = model.refit(inliers)
            if m2 is None:
                break
            r2 = model.residuals(np.asarray(m2)[None])[0]
            med2 = float(np.median(r2 * r2))
            sigma2 = reweighted_scale(r2, inliers, p)
            in2 = r2 <= max(inlier_multiplier * sigma2, min_threshold)
            if in2.sum() < p:
                break
            same = np.array_equal(in2, inliers)
            best, r, sigma, inliers, best_med = m2, r2, sigma2, in2, med2
            if same:
                break
    return LMedSResult(np.asarray(best), inliers, sigma, r, best_med, len(samples))


# ---------------------------------------------------------------------------
# Pair geometry and feature tracks
# ---------------------------------------------------------------------------


@dataclass
class PairGeometry:
    i: int
    j: int
    F: np.ndarray
    sigma: float
    inliers: tuple = ()

    def __post_init__(self):
        self.F = normalize_fundamental(np.asarray(self.F, dtype=float))
        if self.sigma < 0:
            raise InputError("epipolar sigma must be non-negative")


@dataclass
class FeatureTrack:
    id: int
    observations: dict[int, np.ndarray]
    point: np.ndarray | None = None
    inlier: dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.observations) < 2:
            raise InputError(f"feature track {self.id} has fewer than 2 views")
        self.observations = {int(k): np.asarray(v, dtype=float) for k, v in self.observations.items()}
        if not self.inlier:
            self.inlier = {k: True for k in self.observations}

    def inlier_views(self) -> list[int]:
        return [k for k in sorted(self.observations) if self.inlier.get(k, True)]


def estimate_fundamental(matches, seed=0, *, grid: int = BUCKET_GRID, i: int = 0, j: int = 1,
                         ids: Sequence | None = None, **kw) -> PairGeometry:
    """LMedS fundamental matrix from ``(x1, x2)`` correspondences with bucketed sampling."""
    x1, x2 = (np.asarray(a, dtype=float) for a in matches)
    if len(x1) < 8:
        raise InsufficientDataError(f"need at least 8 correspondences, got {len(x1)}")
    res = lmeds_estimate(FundamentalModel(x1, x2, grid), None, seed, **kw)
    ids = list(range(len(x1))) if ids is None else list(ids)
    inl = tuple(t for t, ok in zip(ids, res.inliers) if ok)
    return PairGeometry(i, j, res.model, res.sigma, inl)


def fundamental_from_cameras(P1, P2) -> np.ndarray:
    """``F = [e']_x P2 P1^+`` for two projection matrices."""
    P1 = P1.P if isinstance(P1, ProjectiveCamera) else np.asarray(P1, float)
    P2 = P2.P if isinstance(P2, ProjectiveCamera) else np.asarray(P2, float)
    _, _, vt = np.linalg.svd(P1)
    C1 = vt[-1]
    e2 = P2 @ C1
    ex = np.array([[0, -e2[2], e2[1]], [e2[2], 0, -e2[0]], [-e2[1], e2[0], 0]])
    return normalize_fundamental(ex @ P2 @ np.linalg.pinv(P1))


@dataclass
class RobustTriangulation:
    point: np.ndarray
    inliers: np.ndarray
    sigma: float
    residuals: np.ndarray


def robust_triangulate(views: Sequence[tuple], seed=0, *, inlier_multiplier: float = INLIER_MULTIPLIER,
                       min_threshold: float = MIN_THRESHOLD, refit: bool | str = True) -> RobustTriangulation:
    """LMedS multi-view triangulation; ``views`` is a list of ``(camera, ideal xy)``."""
    if len(views) < 2:
        raise InsufficientDataError("robust triangulation needs at least 2 views")
    Ps = [v[0].P if isinstance(v[0], ProjectiveCamera) else np.asarray(v[0], float) for v in views]
    xs = np.array([np.asarray(v[1], float)[:2] for v in views])
    model = PointModel(Ps, xs)
    if len(views) == 2:
        X = model.refit(np.ones(2, bool))
        if X is None:
            raise DegenerateGeometryError("no usable view pair")
        r = model.residuals(X)[0]
        return RobustTriangulation(X, np.ones(2, bool), 0.0, r)
    res = lmeds_estimate(model, None, seed, inlier_multiplier=inlier_multiplier,
                         min_threshold=min_threshold, refit=refit)
    if res.inliers.sum() < 2:
        raise DegenerateGeometryError("fewer than 2 inlier views")
    return RobustTriangulation(res.model, res.inliers, res.sigma, res.residuals)


def triangulation_covariance(view_a, view_b, point, sigma_image: float) -> np.ndarray:
    """First-order covariance of a two-view triangulated point under isotropic image noise."""
    X = np.asarray(point, dtype=float)[:3]
    J = []
    for cam in (view_a, view_b):
        P = cam.P if isinstance(cam, ProjectiveCamera) else np.asarray(cam, float)
        h = P @ np.append(X, 1.0)
        J.append((P[0, :3] * h[2] - h[0] * P[2, :3]) / h[2] ** 2)
        J.append((P[1, :3] * h[2] - h[1] * P[2, :3]) / h[2] ** 2)
    J = np.array(J)
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] < 1e-10 * s[0]:
        raise DegenerateGeometryError("parallel rays: covariance is singular")
    Jp = np.linalg.pinv(J)
    cov = sigma_image**2 * Jp @ Jp.T
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# Camera refinement from feature tracks
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    interior: InteriorParams
    exteriors: dict[int, ExteriorParams]
    tracks: list[FeatureTrack]
    pairs: dict[tuple[int, int], PairGeometry]
    excluded_images: list[int]
    rmse_before: float
    rmse_after: float
    pruned_pair: list[tuple[int, int]] = field(default_factory=list)
    pruned_triangulation: list[tuple[int, int]] = field(default_factory=list)


def estimate_pairs(tracks: Sequence[FeatureTrack], interior: InteriorParams, seed=0, *,
                   min_pair_matches: int = 8, inlier_multiplier: float = INLIER_MULTIPLIER):
    """LMedS pair geometry for every image pair sharing enough features (distortion removed first).

    Returns the pairs plus, per track, the images in which it was a pair inlier
    and the images in which it took part in any pair estimate.
    """
    rng = _rng(seed)
    ideal = _ideal_tracks(tracks, interior)
    images = sorted({im for t in tracks for im in t.observations})
    pair_ok: dict[int, set[int]] = {t.id: set() for t in tracks}
    pair_seen: dict[int, set[int]] = {t.id: set() for t in tracks}
    pairs = {}
    for a, b in combinations(images, 2):
        shared = [t.id for t in tracks if a in t.observations and b in t.observations]
        if len(shared) < min_pair_matches:
            continue
        x1 = np.array([ideal[t][a] for t in shared])
        x2 = np.array([ideal[t][b] for t in shared])
        try:
            geom = estimate_fundamental((x1, x2), rng, i=a, j=b, ids=shared,
                                        inlier_multiplier=inlier_multiplier)
        except NumericalError as exc:
            log.info("pair (%d, %d): fundamental estimation failed: %s", a, b, exc)
            continue
        pairs[(a, b)] = geom
        inl = set(geom.inliers)
        for t in shared:
            pair_seen[t] |= {a, b}
            if t in inl:
                pair_ok[t] |= {a, b}
    return pairs, pair_ok, pair_seen


def _ideal_tracks(tracks, interior):
    out = {}
    for t in tracks:
        out[t.id] = {im: undistort(interior, xy) for im, xy in t.observations.items()}
    return out


def _cameras(interior, exteriors):
    K = interior.pinhole()
    return {i: ProjectiveCamera.compose(K, E) for i, E in exteriors.items()}


def refine_cameras(tracks: Sequence[FeatureTrack], interior: InteriorParams,
                   exteriors: Mapping[int, ExteriorParams], seed=0, *,
                   min_pair_matches: int = 8, inlier_multiplier: float = INLIER_MULTIPLIER,
                   adjust: bool = True, max_rounds: int = 3) -> RefineResult:
    """Pairwise LMedS fundamentals, robust triangulation, then adjustment on inliers only."""
    from .bundle import bundle_adjust_free

    rng = _rng(seed)
    exteriors = dict(exteriors)
    initial_interior = interior
    images = sorted({im for t in tracks for im in t.observations})
    for im in images:
        if im not in exteriors:
            raise InputError(f"feature observations reference image {im} without a camera")

    # step 2: pairwise fundamental matrices
    pairs, pair_ok, pair_seen = estimate_pairs(tracks, interior, rng, min_pair_matches=min_pair_matches,
                                               inlier_multiplier=inlier_multiplier)
    pruned_pair = []
    pair_flags = {
        t.id: {im: im in pair_ok[t.id] or im not in pair_seen[t.id] for im in t.observations}
        for t in tracks
    }
    for t in tracks:
        pruned_pair.extend((t.id, im) for im, ok in pair_flags[t.id].items() if not ok)

    # steps 3-4, repeated with the adjusted cameras until the inlier set settles
    from .bundle import Problem

    new_tracks, pruned_tri = _screen_tracks(tracks, pair_flags, interior, exteriors, rng,
                                            inlier_multiplier)
    excluded: list[int] = []
    before = after = None
    for round_ in range(max_rounds):
        obs, state, excluded = _inlier_network(new_tracks, images, interior, exteriors)
        rmse = float(np.sqrt(np.mean(Problem(state, obs).residuals(state) ** 2))) if len(obs) else 0.0
        if before is None:
            before = rmse
        after = rmse
        if not adjust or not len(obs):
            break
        sol = bundle_adjust_free(obs, state)
        interior = sol.interior
        exteriors.update(sol.exteriors)
        after = sol.rmse
        for t in new_tracks:
            if t.id in sol.points:
                t.point = np.asarray(sol.points[t.id])
        rescreened, pruned2 = _screen_tracks(tracks, pair_flags, interior, exteriors, rng,
                                             inlier_multiplier)
        if [t.inlier for t in rescreened] == [t.inlier for t in new_tracks]:
            break
        log.info("refinement round %d changed the inlier set; adjusting again", round_ + 1)
        keep_points = {t.id: t.point for t in new_tracks}
        new_tracks, pruned_tri = rescreened, pruned2
        for t in new_tracks:
            if t.point is not None and keep_points.get(t.id) is not None:
                t.point = keep_points[t.id]
    for im in excluded:
        log.warning("image %d has fewer than 8 inlier observations; excluded from refinement", im)
    if adjust and interior != initial_interior:
        # pair geometry is handed on to target matching, so express it in the refined image frame
        pairs, _, _ = estimate_pairs(tracks, interior, rng, min_pair_matches=min_pair_matches,
                                     inlier_multiplier=inlier_multiplier)
    return RefineResult(interior, exteriors, new_tracks, pairs, excluded, before, after,
                        pruned_pair, pruned_tri)


def _screen_tracks(tracks, pair_flags, interior, exteriors, rng, inlier_multiplier):
    cams = _cameras(interior, exteriors)
    ideal = _ideal_tracks(tracks, interior)
    out, pruned = [], []
    for t in tracks:
        flags = dict(pair_flags[t.id])
        views = [im for im in sorted(t.observations) if flags[im]]
        point = None
        if len(views) >= 2:
            try:
                rt = robust_triangulate([(cams[im], ideal[t.id][im]) for im in views], rng,
                                        inlier_multiplier=inlier_multiplier)
                point = rt.point
                for im, ok in zip(views, rt.inliers):
                    if not ok:
                        flags[im] = False
                        pruned.append((t.id, im))
            except NumericalError:
                point = None
        if point is None or sum(flags.values()) < 2:
            flags = {im: False for im in flags}
        out.append(FeatureTrack(t.id, dict(t.observations), point, flags))
    return out, pruned


def _inlier_network(tracks, images, interior, exteriors):
    from .bundle import NetworkState, Observation, ObservationSet

    counts = {im: 0 for im in images}
    for t in tracks:
        for im, ok in t.inlier.items():
            counts[im] += int(ok)
    excluded = sorted(im for im, c in counts.items() if c < 8)
    records = []
    for t in tracks:
        if t.point is None:
            continue
        for im in sorted(t.observations):
            if t.inlier[im] and im not in excluded:
                xy = t.observations[im]
                records.append(Observation(im, t.id, float(xy[0]), float(xy[1]), 1.0))
    points = {t.id: t.point for t in tracks if t.point is not None}
    obs = ObservationSet.from_records(records)
    used = set(obs.targets)
    state = NetworkState(interior, dict(exteriors), {k: v for k, v in points.items() if k in used})
    return obs, state, excluded
