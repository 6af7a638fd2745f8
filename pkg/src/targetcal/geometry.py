"""Value types and exact projective-geometry primitives.

Image frame: x to the right, y down, origin at the top-left pixel corner.
Camera frame: x right, y down, z along the optical axis (positive depth in front).
A camera maps an object point X to ideal pixel coordinates via
``P = K R [I | -C]`` with ``K = [[c, 0, xp], [0, c, yp], [0, 0, 1]]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distortion import distort
from .errors import (
    BehindCameraError,
    ConicClassError,
    DegenerateGeometryError,
    InputError,
)

TRIANGULATION_CONDITION = 1e-8


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-12:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + np.sin(theta) / theta * W
        + (1 - np.cos(theta)) / theta**2 * W @ W
    )


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    """Geometric ellipse: center, semi-axes ``a >= b > 0`` and angle in ``[0, pi)``."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.a, self.b, self.theta)
        if not all(np.isfinite(v) for v in vals):
            raise InputError(f"non-finite ellipse parameters {vals}")
        if not self.b > 0:
            raise InputError(f"degenerate ellipse: semi-minor {self.b} <= 0")
        if self.a < self.b:
            raise InputError(f"semi-major {self.a} < semi-minor {self.b}")
        if not 0 <= self.theta < np.pi:
            raise InputError(f"ellipse angle {self.theta} outside [0, pi)")

    @classmethod
    def canonical(cls, cx, cy, a, b, theta) -> "Ellipse":
        """Build an ellipse, swapping axes and wrapping the angle as needed."""
        a, b = float(a), float(b)
        theta = float(theta)
        if a < b:
            a, b = b, a
            theta += np.pi / 2
        theta = float(np.mod(theta, np.pi))
        if theta >= np.pi:
            theta = 0.0
        return cls(float(cx), float(cy), a, b, theta)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def translated(self, dx: float, dy: float) -> "Ellipse":
        return Ellipse(self.cx + dx, self.cy + dy, self.a, self.b, self.theta)

    def points(self, n: int = 360) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = np.cos(self.theta), np.sin(self.theta)
        x = self.a * np.cos(t)
        y = self.b * np.sin(t)
        return np.stack([self.cx + c * x - s * y, self.cy + s * x + c * y], axis=-1)


def normalize_conic_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    if M[0, 0] + M[1, 1] < 0:
        M = -M
    n = np.linalg.norm(M)
    if n == 0 or not np.isfinite(n):
        raise InputError("conic matrix is zero or non-finite")
    return M / n


@dataclass(frozen=True, eq=False)
class Conic:
    """Symmetric 3x3 conic, normalized to unit Frobenius norm with positive leading trace."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _readonly(normalize_conic_matrix(self.matrix)))

    def __call__(self, pts) -> np.ndarray:
        """Evaluate ``x^T C x`` at Euclidean points of shape ``(n, 2)``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        h = np.column_stack([pts, np.ones(len(pts))])
        return np.einsum("ni,ij,nj->n", h, self.matrix, h)

    def transformed(self, H) -> "Conic":
        """Conic in the frame ``x' = H x``: ``C' = H^-T C H^-1``."""
        Hi = np.linalg.inv(H)
        return Conic(Hi.T @ self.matrix @ Hi)


@dataclass(frozen=True, eq=False)
class Quadric:
    """Symmetric 4x4 quadric (a cone when built from a conic and a camera)."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (4, 4):
            raise InputError(f"quadric must be 4x4, got {M.shape}")
        object.__setattr__(self, "matrix", _readonly(0.5 * (M + M.T)))


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``t1 X + t2 Y + t3 Z + t4 = 0`` with unit normal ``(t1, t2, t3)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.coeffs, dtype=float).reshape(4)
        n = np.linalg.norm(t[:3])
        if n < 1e-12 * max(1.0, abs(t[3])):
            raise DegenerateGeometryError("plane at infinity")
        object.__setattr__(self, "coeffs", _readonly(t / n))

    @property
    def normal(self) -> np.ndarray:
        return self.coeffs[:3]

    def distance(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.coeffs[:3] + self.coeffs[3]


@dataclass(frozen=True)
class InteriorParams:
    """Interior orientation: principal distance, principal point, distortion."""

    c: float
    xp: float
    yp: float
    radial: tuple[float, ...] = ()
    decentering: tuple[float, float] | None = None

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise InputError(f"principal distance must be positive, got {self.c}")
        object.__setattr__(self, "radial", tuple(float(k) for k in self.radial))
        if len(self.radial) > 5:
            raise InputError("at most 5 radial terms are supported")
        if self.decentering is not None:
            p1, p2 = self.decentering
            object.__setattr__(self, "decentering", (float(p1), float(p2)))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.c, 0.0, self.xp], [0.0, self.c, self.yp], [0.0, 0.0, 1.0]])

    @property
    def n_radial(self) -> int:
        return len(self.radial)

    @property
    def has_distortion(self) -> bool:
        return any(self.radial) or (
            self.decentering is not None and any(self.decentering)
        )

    def with_terms(self, n_radial: int, decentering: bool = False) -> "InteriorParams":
        """Copy with the radial list truncated or zero-padded to ``n_radial`` terms."""
        k = list(self.radial[:n_radial]) + [0.0] * max(0, n_radial - len(self.radial))
        dec = None
        if decentering:
            dec = self.decentering if self.decentering is not None else (0.0, 0.0)
        return InteriorParams(self.c, self.xp, self.yp, tuple(k), dec)

    def pinhole(self) -> "InteriorParams":
        return InteriorParams(self.c, self.xp, self.yp)


@dataclass(frozen=True, eq=False)
class ExteriorParams:
    """Exterior orientation: object-to-camera rotation and perspective center."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        C = np.asarray(self.center, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise InputError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10 or abs(np.linalg.det(R) - 1) > 1e-10:
            raise InputError("rotation matrix is not orthonormal with det +1")
        if not np.all(np.isfinite(C)):
            raise InputError("non-finite perspective center")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "center", _readonly(C))

    def to_camera(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return (X - self.center) @ self.rotation.T


@dataclass(frozen=True, eq=False)
class ProjectiveCamera:
    """Rank-3 pinhole projection matrix, optionally remembering its parts."""

    P: np.ndarray
    interior: InteriorParams | None = field(default=None)
    exterior: ExteriorParams | None = field(default=None)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.shape != (3, 4):
            raise InputError(f"camera matrix must be 3x4, got {P.shape}")
        if np.linalg.matrix_rank(P, tol=1e-12 * np.linalg.norm(P)) != 3:
            raise InputError("camera matrix must have rank 3")
        object.__setattr__(self, "P", _readonly(P))

    @classmethod
    def compose(cls, interior: InteriorParams, exterior: ExteriorParams) -> "ProjectiveCamera":
        Rt = np.hstack([exterior.rotation, -(exterior.rotation @ exterior.center)[:, None]])
        return cls(interior.K @ Rt, interior, exterior)

    @property
    def center(self) -> np.ndarray:
        _, _, vt = np.linalg.svd(self.P)
        c = vt[-1]
        return c[:3] / c[3]

    def project(self, X) -> np.ndarray:
        """Ideal (distortion-free) projection of Euclidean points ``(n, 3)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        h = np.column_stack([X, np.ones(len(X))]) @ self.P.T
        return h[:, :2] / h[:, 2:3]

    def depth_sign(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w = np.column_stack([X, np.ones(len(X))]) @ self.P[2]
        return np.sign(w * np.linalg.det(self.P[:, :3]))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def ellipse_to_conic(e: Ellipse) -> Conic:
    c, s = np.cos(e.theta), np.sin(e.theta)
    R = np.array([[c, -s], [s, c]])
    Q = R @ np.diag([1 / e.a**2, 1 / e.b**2]) @ R.T
    ctr = e.center
    M = np.empty((3, 3))
    M[:2, :2] = Q
    M[:2, 2] = M[2, :2] = -Q @ ctr
    M[2, 2] = ctr @ Q @ ctr - 1.0
    return Conic(M)


def conic_center(M) -> np.ndarray:
    """Center of a central conic from the ratios of its 2x2 minors."""
    M = np.asarray(M, dtype=float)
    d33 = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(d33) < 1e-14 * np.linalg.norm(M[:2, :2]) ** 2:
        raise DegenerateGeometryError("conic has no finite center (parabolic)")
    d31 = M[0, 1] * M[1, 2] - M[0, 2] * M[1, 1]
    d32 = M[0, 0] * M[1, 2] - M[0, 2] * M[1, 0]
    return np.array([d31 / d33, -d32 / d33])


def classify_conic(M) -> str:
    M = normalize_conic_matrix(M)
    w = np.linalg.eigvalsh(M[:2, :2])
    scale = np.max(np.abs(w))
    if scale < 1e-14:
        return "degenerate"
    if abs(w[0]) < 1e-12 * scale:
        return "degenerate" if abs(np.linalg.det(M)) < 1e-14 * scale else "parabola"
    ctr = conic_center(M)
    # value at the center decides between real, imaginary and line-pair conics;
    # compared with the squared coordinate magnitude so pixel-frame conics are not penalized
    f0 = M[2, 2] + M[:2, 2] @ ctr
    if abs(f0) < 1e-14 * scale * (1.0 + ctr @ ctr):
        return "degenerate"
    if w[0] < 0:
        return "hyperbola"
    return "ellipse" if f0 < 0 else "imaginary ellipse"


def conic_to_ellipse(C: Conic | np.ndarray) -> Ellipse:
    M = C.matrix if isinstance(C, Conic) else normalize_conic_matrix(C)
    kind = classify_conic(M)
    if kind != "ellipse":
        raise ConicClassError(kind)
    ctr = conic_center(M)
    Q = M[:2, :2]
    f0 = M[2, 2] + M[:2, 2] @ ctr
    w, v = np.linalg.eigh(Q / -f0)
    a = 1 / np.sqrt(w[0])
    b = 1 / np.sqrt(w[1])
    theta = np.arctan2(v[1, 0], v[0, 0])
    return Ellipse.canonical(ctr[0], ctr[1], a, b, theta)


def fit_conic_through_points(pts) -> Conic:
    """Exact (least-squares for more than five) algebraic conic through points."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 5:
        raise InputError("need at least 5 points for a conic")
    shift = pts.mean(axis=0)
    scale = np.sqrt(2) / np.mean(np.linalg.norm(pts - shift, axis=1))
    T = np.array([[scale, 0, -scale * shift[0]], [0, scale, -scale * shift[1]], [0, 0, 1]])
    q = (pts - shift) * scale
    x, y = q[:, 0], q[:, 1]
    D = np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])
    _, _, vt = np.linalg.svd(D)
    a, b, c, d, e, f = vt[-1]
    Mn = np.array([[a, b / 2, d / 2], [b / 2, c, e / 2], [d / 2, e / 2, f]])
    return Conic(T.T @ Mn @ T)


def cone_from_view(P: ProjectiveCamera | np.ndarray, C: Conic) -> Quadric:
    """Back-projected cone ``A = P^T C P``, normalized to unit Frobenius norm."""
    Pm = P.P if isinstance(P, ProjectiveCamera) else np.asarray(P, dtype=float)
    A = Pm.T @ C.matrix @ Pm
    return Quadric(A / np.linalg.norm(A))


def _as_point3(X) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1)
    if X.size == 4:
        if X[3] == 0:
            raise InputError("point at infinity")
        return X[:3] / X[3]
    if X.size != 3:
        raise InputError("object point must have 3 or 4 components")
    return X


def project_point(K: InteriorParams, E: ExteriorParams, X) -> np.ndarray:
    """Collinearity projection followed by lens distortion; returns pixel ``(x, y)``."""
    Xc = E.to_camera(_as_point3(X))
    if Xc[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth {Xc[2]:.6g}")
    ideal = np.array([K.xp + K.c * Xc[0] / Xc[2], K.yp + K.c * Xc[1] / Xc[2]])
    return distort(K, ideal)


@dataclass(frozen=True, eq=False)
class Triangulation:
    point: np.ndarray
    residuals: np.ndarray  # reprojection distance per view, pixels


def _dlt_rows(P: np.ndarray, x: np.ndarray) -> np.ndarray:
    rows = np.stack([x[0] * P[2] - P[0], x[1] * P[2] - P[1]])
    return rows / np.linalg.norm(rows)


def triangulate(views: Sequence[tuple[ProjectiveCamera | np.ndarray, np.ndarray]]) -> Triangulation:
    """Homogeneous DLT triangulation from two or more ideal image observations."""
    if len(views) < 2:
        raise InputError("triangulation needs at least 2 views")
    Ps = [v[0].P if isinstance(v[0], ProjectiveCamera) else np.asarray(v[0], float) for v in views]
    xs = [np.asarray(v[1], dtype=float).reshape(-1) for v in views]
    xs = [x[:2] / x[2] if x.size == 3 else x for x in xs]
    Ps = [P / np.linalg.norm(P) for P in Ps]
    A = np.vstack([_dlt_rows(P, x) for P, x in zip(Ps, xs)])
    _, s, vt = np.linalg.svd(A)
    if s[2] < TRIANGULATION_CONDITION * s[0]:
        raise DegenerateGeometryError("near-parallel rays in triangulation")
    Xh = vt[-1]
    if abs(Xh[3]) < TRIANGULATION_CONDITION * np.linalg.norm(Xh[:3]):
        raise DegenerateGeometryError("triangulated point at infinity")
    X = Xh[:3] / Xh[3]
    res = np.array([_reproj_distance(P, X, x) for P, x in zip(Ps, xs)])
    return Triangulation(X, res)


def _reproj_distance(P, X, x) -> float:
    h = P @ np.append(X, 1.0)
    return float(np.hypot(h[0] / h[2] - x[0], h[1] / h[2] - x[1]))


def convergence_angle(E1: ExteriorParams, E2: ExteriorParams, X) -> float:
    """Angle at ``X`` between the rays toward both perspective centers, in degrees."""
    X = _as_point3(X)
    u = E1.center - X
    v = E2.center - X
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateGeometryError("point coincides with a perspective center")
    # atan2 keeps full precision for nearly parallel and nearly opposite rays
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), u @ v)))


@dataclass(frozen=True, eq=False)
class Circle3D:
    center: np.ndarray
    radius: float
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", _readonly(n / np.linalg.norm(n)))
        object.__setattr__(self, "center", _readonly(self.center))
        if not self.radius > 0:
            raise InputError("circle radius must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.normal
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)

    def rim(self, n: int = 360) -> np.ndarray:
        u, v = self.basis()
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return self.center + self.radius * (np.cos(t)[:, None] * u + np.sin(t)[:, None] * v)


def plane_homography(circle: Circle3D, K: InteriorParams, E: ExteriorParams) -> np.ndarray:
    u, v = circle.basis()
    H = K.K @ E.rotation @ np.column_stack([u, v, circle.center - E.center])
    return H


def circle_to_image_conic(circle: Circle3D, K: InteriorParams, E: ExteriorParams) -> Conic:
    """Exact ideal image conic of a 3D circle: ``H^-T diag(1, 1, -r^2) H^-1``."""
    if abs((E.center - circle.center) @ circle.normal) < 1e-12 * max(
        1.0, np.linalg.norm(E.center - circle.center)
    ):
        raise DegenerateGeometryError("perspective center lies in the target plane")
    H = plane_homography(circle, K, E)
    Hi = np.linalg.inv(H)
    return Conic(Hi.T @ np.diag([1.0, 1.0, -circle.radius**2]) @ Hi)
