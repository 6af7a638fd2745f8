"""Synthetic two-wall calibration scenes with exact ground truth.

The layout follows a typical laboratory setup: two perpendicular walls meeting
at the z axis (planes x = 0 and y = 0), circular targets on both walls, and a
camera moved along a ladder-like convergent path in front of the corner.  Half
of the images are taken with the camera rolled by 90 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .distortion import distort, distortion_delta
from .errors import InputError
from .geometry import (
    Circle3D,
    Ellipse,
    ExteriorParams,
    InteriorParams,
    circle_to_image_conic,
    conic_to_ellipse,
    rotation_from_axis_angle,
)
from .robust import FeatureTrack

WALL_NORMALS = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))


def normalized_radial(kappa, c: float) -> tuple[float, ...]:
    """Convert coefficients for coordinates scaled by ``c`` into pixel units."""
    return tuple(float(k) / c ** (2 * (i + 1)) for i, k in enumerate(kappa))


@dataclass
class SceneSpec:
    n_targets: int = 30
    n_cameras: int = 90
    wall_width: float = 4.0
    wall_height: float = 3.0
    radius_range: tuple[float, float] = (0.02, 0.10)
    jitter: float = 0.1
    depth_range: tuple[float, float] = (2.0, 5.0)
    height_range: tuple[float, float] = (0.6, 2.4)
    azimuth_range: tuple[float, float] = (5.0, 85.0)  # degrees from the x axis
    roll_split: bool = True
    c: float = 2800.0
    xp: float = 1932.0
    yp: float = 1071.0
    kappa: tuple[float, ...] = (-0.03, 0.01)  # radial terms for coordinates divided by c
    decentering: tuple[float, float] | None = None
    image_size: tuple[int, int] = (3840, 2160)
    noise: float = 0.0
    spurious_rate: float = 0.0
    mismatch_rate: float = 0.0
    n_features: int = 150
    feature_noise: float | None = None
    feature_outlier_rate: float = 0.0
    max_obliquity: float = 75.0  # degrees between the viewing ray and the target normal
    seed: int = 0

    def __post_init__(self):
        if self.n_targets <= 0 or self.n_cameras <= 0:
            raise InputError("target and camera counts must be positive")
        if not (0 < self.radius_range[0] <= self.radius_range[1]):
            raise InputError("target radii must be positive")
        if self.noise < 0 or (self.feature_noise is not None and self.feature_noise < 0):
            raise InputError("noise must be non-negative")
        for name in ("spurious_rate", "mismatch_rate", "feature_outlier_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise InputError(f"{name} must lie in [0, 1]")
        if len(self.kappa) > 5:
            raise InputError("at most 5 radial terms are supported")

    @property
    def interior(self) -> InteriorParams:
        return InteriorParams(self.c, self.xp, self.yp, normalized_radial(self.kappa, self.c),
                              self.decentering)


@dataclass
class GroundTruth:
    spec: SceneSpec
    interior: InteriorParams
    exteriors: dict[int, ExteriorParams]
    circles: dict[int, Circle3D]
    features: dict[int, np.ndarray]
    visible: dict[int, list[int]]  # image -> visible target ids
    omitted: list[tuple[int, int, str]] = field(default_factory=list)

    def true_center(self, image: int, target: int, distorted: bool = True) -> np.ndarray:
        """Projection of the 3D circle center (not the ellipse center)."""
        E = self.exteriors[image]
        Xc = E.to_camera(self.circles[target].center)
        K = self.interior
        x = np.array([K.xp + K.c * Xc[0] / Xc[2], K.yp + K.c * Xc[1] / Xc[2]])
        return distort(K, x) if distorted else x


@dataclass
class Label:
    image: int
    index: int
    target: int | None
    kind: str  # "target", "spurious" or "mismatch"


@dataclass
class Rendered:
    detections: dict[int, list[Ellipse]]
    labels: list[Label]
    features: list[FeatureTrack]
    feature_outliers: list[tuple[int, int]]
    mismatches: list[tuple[int, int, int]]  # (target, image, reference image)

    def label_map(self) -> dict[tuple[int, int], Label]:
        return {(lb.image, lb.index): lb for lb in self.labels}


def look_at(center, target, roll: float = 0.0) -> np.ndarray:
    """Object-to-camera rotation looking from ``center`` at ``target``; image y points down."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    if np.linalg.norm(x) < 1e-9:
        raise InputError("viewing direction is vertical")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    if roll:
        cr, sr = np.cos(roll), np.sin(roll)
        R = np.array([[cr, sr, 0], [-sr, cr, 0], [0, 0, 1.0]]) @ R
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def _wall_point(wall: int, s: float, h: float) -> np.ndarray:
    return np.array([0.0, s, h]) if wall == 0 else np.array([s, 0.0, h])


def _in_image(xy, spec: SceneSpec, margin: float = 0.0) -> np.ndarray:
    xy = np.atleast_2d(xy)
    w, h = spec.image_size
    return (xy[:, 0] >= margin) & (xy[:, 0] <= w - margin) & (xy[:, 1] >= margin) & (xy[:, 1] <= h - margin)


def _project(interior, E, X):
    Xc = E.to_camera(np.atleast_2d(X))
    with np.errstate(divide="ignore", invalid="ignore"):
        ideal = np.column_stack([interior.xp + interior.c * Xc[:, 0] / Xc[:, 2],
                                 interior.yp + interior.c * Xc[:, 1] / Xc[:, 2]])
    return distort(interior, ideal), Xc[:, 2]


def _target_visible(circle: Circle3D, interior, E, spec) -> tuple[bool, str]:
    ray = E.center - circle.center
    depth_side = ray @ circle.normal
    if depth_side <= 0:
        return False, "behind target plane"
    obliq = np.degrees(np.arccos(np.clip(depth_side / np.linalg.norm(ray), -1, 1)))
    if obliq > spec.max_obliquity:
        return False, "too oblique"
    rim, depth = _project(interior, E, circle.rim(36))
    if np.any(depth <= 0):
        return False, "behind camera"
    if not np.all(_in_image(rim, spec, margin=5.0)):
        return False, "outside image"
    return True, ""


def generate_scene(spec: SceneSpec, strict: bool = True) -> GroundTruth:
    """Targets on two walls and a convergent ladder path of cameras in front of the corner."""
    rng = np.random.default_rng(spec.seed)
    interior = spec.interior
    W, H = spec.wall_width, spec.wall_height

    # targets: a jittered grid split over both walls
    n0 = (spec.n_targets + 1) // 2
    circles = {}
    tid = 0
    for wall, count in ((0, n0), (1, spec.n_targets - n0)):
        if count == 0:
            continue
        cols = int(np.ceil(np.sqrt(count * W / H)))
        rows = int(np.ceil(count / cols))
        cells = [(r, c) for r in range(rows) for c in range(cols)][:count]
        for r, c in cells:
            s = (c + 0.5) / cols * (W - 0.4) + 0.3
            h = (r + 0.5) / rows * (H - 0.6) + 0.3
            s += rng.uniform(-1, 1) * spec.jitter * (W / cols) * 0.5
            h += rng.uniform(-1, 1) * spec.jitter * (H / rows) * 0.5
            radius = rng.uniform(*spec.radius_range)
            circles[tid] = Circle3D(_wall_point(wall, s, h), radius, WALL_NORMALS[wall])
            tid += 1

    features = {}
    for f in range(spec.n_features):
        wall = f % 2
        features[f] = _wall_point(wall, rng.uniform(0.1, W - 0.1), rng.uniform(0.1, H - 0.1))

    # cameras: ladder path, sweeping azimuth at several heights
    centroid = np.mean([c.center for c in circles.values()], axis=0)
    aim = np.array([0.4 * W, 0.4 * W, centroid[2]])
    across = np.array([-1.0, 1.0, 0.0]) / np.sqrt(2)
    n = spec.n_cameras
    n_levels = max(1, min(4, n // 5))
    exteriors = {}
    for i in range(n):
        level = i % n_levels
        t = (i // n_levels) / max(1, (n - 1) // n_levels)
        az = np.radians(spec.azimuth_range[0] + (spec.azimuth_range[1] - spec.azimuth_range[0]) * t)
        az += np.radians(rng.uniform(-3, 3))
        frac = (i * 0.618034) % 1.0
        d = spec.depth_range[0] + (spec.depth_range[1] - spec.depth_range[0]) * frac
        z = spec.height_range[0] + (spec.height_range[1] - spec.height_range[0]) * (
            level / max(1, n_levels - 1)
        )
        C = aim + np.array([d * np.cos(az), d * np.sin(az), 0.0])
        C[2] = z
        if C[0] <= 0.05 or C[1] <= 0.05:
            raise InputError(f"camera {i} lies inside or behind a wall")
        sweep = np.sin(2 * np.pi * ((i * 0.381966) % 1.0))
        look = aim + 0.3 * W * sweep * across + rng.uniform(-0.2, 0.2, 3)
        roll = np.pi / 2 if spec.roll_split and i >= n // 2 else 0.0
        exteriors[i] = ExteriorParams(look_at(C, look, roll), C)

    visible: dict[int, list[int]] = {}
    omitted = []
    for i, E in exteriors.items():
        visible[i] = []
        for t, circle in circles.items():
            ok, why = _target_visible(circle, interior, E, spec)
            if ok:
                visible[i].append(t)
            else:
                omitted.append((i, t, why))
    counts = {t: sum(t in v for v in visible.values()) for t in circles}
    hidden = [t for t, k in counts.items() if k < 2]
    if hidden and strict:
        raise InputError(f"targets {hidden} are visible in fewer than 2 images")
    return GroundTruth(spec, interior, exteriors, circles, features, visible, omitted)


def render_ellipse(circle: Circle3D, interior: InteriorParams, E: ExteriorParams) -> Ellipse:
    """Exact image ellipse of a circle; distortion shifts the whole ellipse by the center offset."""
    e = conic_to_ellipse(circle_to_image_conic(circle, interior.pinhole(), E))
    if not interior.has_distortion:
        return e
    dx, dy = distortion_delta(interior, e.cx - interior.xp, e.cy - interior.yp)
    return e.translated(float(dx), float(dy))


def _fake_circle(circle: Circle3D, ref: ExteriorParams, s: float) -> Circle3D:
    return Circle3D(ref.center + s * (circle.center - ref.center), s * circle.radius, circle.normal)


def render_observations(truth: GroundTruth, spec: SceneSpec | None = None, seed=None) -> Rendered:
    """Ellipse detections, labels and feature tracks for every image of ``truth``.

    Center noise is ``spec.noise`` (pixels); semi-axes get a quarter of it.
    Spurious ellipses and planted mismatches follow the configured rates.
    """
    spec = spec or truth.spec
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    K = truth.interior

    # planted mismatches: replace (target, image) with a homothetic copy seen from another view
    plan = {}
    if spec.mismatch_rate > 0:
        pairs = [(t, i) for i in sorted(truth.visible) for t in truth.visible[i]]
        n_mis = int(round(spec.mismatch_rate * len(pairs)))
        used = set()
        for k in rng.permutation(len(pairs)):
            if len(plan) >= n_mis:
                break
            t, j = pairs[k]
            views = [i for i in truth.visible if t in truth.visible[i]]
            if t in used or len(views) < 4:
                continue
            refs = [i for i in views if i != j]
            for i in rng.permutation(refs):
                s = rng.choice([rng.uniform(0.75, 0.85), rng.uniform(1.15, 1.3)])
                fake = _fake_circle(truth.circles[t], truth.exteriors[int(i)], s)
                ok, _ = _target_visible(fake, K, truth.exteriors[j], spec)
                if ok:
                    plan[(t, j)] = (fake, int(i))
                    used.add(t)
                    break

    detections: dict[int, list[Ellipse]] = {}
    labels: list[Label] = []
    mismatches = []
    for i in sorted(truth.exteriors):
        E = truth.exteriors[i]
        items = []
        for t in truth.visible[i]:
            if (t, i) in plan:
                fake, ref = plan[(t, i)]
                items.append((render_ellipse(fake, K, E), None, "mismatch"))
                mismatches.append((t, i, ref))
            else:
                items.append((render_ellipse(truth.circles[t], K, E), t, "target"))
        n_spur = int(round(spec.spurious_rate * len(truth.visible[i])))
        w, h = spec.image_size
        for _ in range(n_spur):
            a = rng.uniform(10, 80)
            b = a * rng.uniform(0.3, 1.0)
            e = Ellipse(rng.uniform(100, w - 100), rng.uniform(100, h - 100), a, b,
                        rng.uniform(0, np.pi))
            items.append((e, None, "spurious"))
        order = rng.permutation(len(items))
        out = []
        for idx, k in enumerate(order):
            e, t, kind = items[k]
            if spec.noise > 0:
                e = Ellipse.canonical(
                    e.cx + rng.normal(0, spec.noise), e.cy + rng.normal(0, spec.noise),
                    max(e.a + rng.normal(0, spec.noise / 4), 1e-3),
                    max(e.b + rng.normal(0, spec.noise / 4), 1e-3), e.theta,
                )
            out.append(e)
            labels.append(Label(i, idx, t, kind))
        detections[i] = out

    fnoise = spec.noise if spec.feature_noise is None else spec.feature_noise
    tracks = []
    outliers = []
    for f, X in truth.features.items():
        obs = {}
        for i, E in truth.exteriors.items():
            xy, depth = _project(K, E, X)
            if depth[0] > 0 and (E.center - X) @ WALL_NORMALS[f % 2] > 0 and _in_image(xy, spec)[0]:
                p = xy[0]
                if fnoise > 0:
                    p = p + rng.normal(0, fnoise, 2)
                obs[i] = p
        if len(obs) < 2:
            continue
        for i in list(obs):
            if spec.feature_outlier_rate > 0 and rng.random() < spec.feature_outlier_rate:
                ang = rng.uniform(0, 2 * np.pi)
                obs[i] = obs[i] + rng.uniform(20, 60) * np.array([np.cos(ang), np.sin(ang)])
                outliers.append((f, i))
        tracks.append(FeatureTrack(f, obs))
    return Rendered(detections, labels, tracks, outliers, mismatches)


def perturb_cameras(truth: GroundTruth, seed=0, *, rotation_deg: float = 0.5, center_sigma: float = 0.02,
                    c_rel: float = 0.02, pp_sigma: float = 10.0, keep_distortion: bool = False):
    """Initial interior/exterior estimates near the truth, as an SfM stage would provide."""
    rng = np.random.default_rng(seed)
    K = truth.interior
    interior = InteriorParams(
        K.c * (1 + rng.choice([-1, 1]) * c_rel),
        K.xp + rng.normal(0, pp_sigma),
        K.yp + rng.normal(0, pp_sigma),
        K.radial if keep_distortion else (),
        K.decentering if keep_distortion else None,
    )
    exteriors = {}
    for i, E in truth.exteriors.items():
        w = rng.normal(0, 1, 3)
        w *= np.radians(rotation_deg) / max(np.linalg.norm(w), 1e-12)
        R = rotation_from_axis_angle(w) @ E.rotation
        exteriors[i] = ExteriorParams(R, E.center + rng.normal(0, center_sigma, 3))
    return interior, exteriors


def oblique_scene_spec(**kw) -> SceneSpec:
    """Few large targets viewed obliquely; used for eccentricity studies."""
    base = dict(n_targets=12, n_cameras=40, wall_width=2.0, wall_height=1.5, radius_range=(0.15, 0.25), kappa=(),
                azimuth_range=(15.0, 75.0), depth_range=(2.2, 3.5), height_range=(0.5, 1.5), n_features=120)
    base.update(kw)
    return SceneSpec(**base)


def with_noise(spec: SceneSpec, **kw) -> SceneSpec:
    return replace(spec, **kw)
