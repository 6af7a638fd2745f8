"""Free-network self-calibrating bundle adjustment.

Unknowns are one set of interior parameters (network-invariant), one exterior
orientation per image and one object point per target.  The 7-parameter datum
defect is removed with inner constraints on the object points (centroid,
mean orientation, mean scale), bordered onto the normal equations.

Distortion coefficients are carried internally in a scaled form,
``kappa_i = k_i * r0**(2 i)`` and ``ps_i = p_i * r0`` with ``r0`` the initial
principal distance, which keeps the normal matrix well conditioned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .distortion import distortion_delta, distortion_jacobian
from .errors import AdjustmentError, InputError
from .geometry import ExteriorParams, InteriorParams, rotation_from_axis_angle, skew

log = logging.getLogger(__name__)

DATUM_RANK = 7


@dataclass(frozen=True)
class Observation:
    image: int
    target: Hashable
    x: float
    y: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight >= 0:
            raise InputError(f"observation weight must be >= 0, got {self.weight}")


@dataclass
class ObservationSet:
    """Columnar observations; ``point`` indexes into ``targets``."""

    image: np.ndarray
    point: np.ndarray
    xy: np.ndarray
    weight: np.ndarray
    targets: list

    @classmethod
    def from_records(cls, records: Iterable[Observation]) -> "ObservationSet":
        records = list(records)
        targets = sorted({r.target for r in records}, key=_sort_key)
        index = {t: i for i, t in enumerate(targets)}
        return cls(
            image=np.array([r.image for r in records], dtype=int),
            point=np.array([index[r.target] for r in records], dtype=int),
            xy=np.array([[r.x, r.y] for r in records], dtype=float).reshape(-1, 2),
            weight=np.array([r.weight for r in records], dtype=float),
            targets=targets,
        )

    def __len__(self) -> int:
        return len(self.image)

    def active(self) -> "ObservationSet":
        m = self.weight > 0
        return ObservationSet(self.image[m], self.point[m], self.xy[m], self.weight[m], self.targets)


def _sort_key(t):
    return (0, t, "") if isinstance(t, (int, np.integer)) else (1, 0, str(t))


@dataclass
class NetworkState:
    interior: InteriorParams
    exteriors: dict[int, ExteriorParams]
    points: dict[Hashable, np.ndarray]


@dataclass
class CalibrationSolution:
    interior: InteriorParams
    interior_std: dict[str, float]
    exteriors: dict[int, ExteriorParams]
    points: dict[Hashable, np.ndarray]
    variance_factor: float
    iop_names: list[str]
    iop_correlation: np.ndarray
    residuals: np.ndarray
    observations: ObservationSet
    redundancy: int
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    point_std: dict[Hashable, np.ndarray] = field(default_factory=dict)

    @property
    def state(self) -> NetworkState:
        return NetworkState(self.interior, dict(self.exteriors), dict(self.points))

    def radial_profile(self) -> tuple[np.ndarray, np.ndarray]:
        return radial_profile(self.state, self.observations, self.residuals)

    @property
    def rmse(self) -> float:
        m = self.observations.weight > 0
        return float(np.sqrt(np.mean(self.residuals[m] ** 2))) if m.any() else 0.0


def iop_names(interior: InteriorParams) -> list[str]:
    names = ["c", "xp", "yp"] + [f"k{i + 1}" for i in range(interior.n_radial)]
    if interior.decentering is not None:
        names += ["p1", "p2"]
    return names


class Problem:
    """Parameter layout, model, analytic Jacobian and retraction for one network."""

    def __init__(self, state: NetworkState, obs: ObservationSet, r0: float | None = None):
        self.obs = obs
        self.r0 = float(r0 if r0 is not None else state.interior.c)
        self.n_radial = state.interior.n_radial
        self.decentering = state.interior.decentering is not None
        self.iop_names = iop_names(state.interior)
        self.n_iop = len(self.iop_names)
        used = obs.weight > 0
        self.images = sorted({int(i) for i in obs.image[used]})
        missing = [i for i in self.images if i not in state.exteriors]
        if missing:
            raise InputError(f"no exterior orientation for images {missing}")
        self.image_index = {im: k for k, im in enumerate(self.images)}
        self.point_ids = [obs.targets[p] for p in sorted({int(p) for p in obs.point[used]})]
        for t in self.point_ids:
            if t not in state.points:
                raise InputError(f"no initial object point for target {t!r}")
        self.point_index = {t: k for k, t in enumerate(self.point_ids)}
        self.cam_offset = self.n_iop
        self.pt_offset = self.n_iop + 6 * len(self.images)
        self.n_params = self.pt_offset + 3 * len(self.point_ids)
        # active observation mapping
        self.active = used
        self.obs_cam = np.array([self.image_index.get(int(i), -1) for i in obs.image])
        self.obs_pt = np.array(
            [self.point_index.get(obs.targets[int(p)], -1) for p in obs.point]
        )

    # -- state <-> arrays --------------------------------------------------
    def iop_vector(self, interior: InteriorParams) -> np.ndarray:
        v = [interior.c, interior.xp, interior.yp]
        v += [k * self.r0 ** (2 * (i + 1)) for i, k in enumerate(interior.radial)]
        if self.decentering:
            v += [p * self.r0 for p in interior.decentering]
        return np.array(v, dtype=float)

    def interior_from_vector(self, v) -> InteriorParams:
        k = tuple(v[3 + i] / self.r0 ** (2 * (i + 1)) for i in range(self.n_radial))
        dec = None
        if self.decentering:
            j = 3 + self.n_radial
            dec = (v[j] / self.r0, v[j + 1] / self.r0)
        return InteriorParams(float(v[0]), float(v[1]), float(v[2]), k, dec)

    def arrays(self, state: NetworkState):
        R = np.array([state.exteriors[i].rotation for i in self.images]).reshape(-1, 3, 3)
        C = np.array([state.exteriors[i].center for i in self.images]).reshape(-1, 3)
        X = np.array([state.points[t] for t in self.point_ids], dtype=float).reshape(-1, 3)
        return R, C, X

    def retract(self, state: NetworkState, delta) -> NetworkState:
        delta = np.asarray(delta, dtype=float)
        interior = self.interior_from_vector(self.iop_vector(state.interior) + delta[: self.n_iop])
        exteriors = dict(state.exteriors)
        for im, k in self.image_index.items():
            d = delta[self.cam_offset + 6 * k : self.cam_offset + 6 * k + 6]
            E = state.exteriors[im]
            R = rotation_from_axis_angle(d[:3]) @ E.rotation
            u, _, vt = np.linalg.svd(R)
            exteriors[im] = ExteriorParams(u @ vt, E.center + d[3:])
        points = dict(state.points)
        for t, k in self.point_index.items():
            points[t] = np.asarray(state.points[t], float) + delta[self.pt_offset + 3 * k : self.pt_offset + 3 * k + 3]
        return NetworkState(interior, exteriors, points)

    # -- model -------------------------------------------------------------
    def _camera_coords(self, state: NetworkState):
        R, C, X = self.arrays(state)
        m = self.active
        Ri = R[self.obs_cam[m]]
        Xc = np.einsum("nij,nj->ni", Ri, X[self.obs_pt[m]] - C[self.obs_cam[m]])
        return Ri, Xc

    def model(self, state: NetworkState) -> np.ndarray:
        """Modeled image coordinates for active observations, shape ``(n_active, 2)``."""
        _, Xc = self._camera_coords(state)
        return self._project(state.interior, Xc)

    @staticmethod
    def _project(K: InteriorParams, Xc: np.ndarray) -> np.ndarray:
        u = Xc[:, :2] / Xc[:, 2:3]
        xb = K.c * u
        dx, dy = distortion_delta(K, xb[:, 0], xb[:, 1])
        return np.column_stack([K.xp + xb[:, 0] + dx, K.yp + xb[:, 1] + dy])

    def depths(self, state: NetworkState) -> np.ndarray:
        return self._camera_coords(state)[1][:, 2]

    def residuals(self, state: NetworkState) -> np.ndarray:
        """Observed minus modeled coordinates for active observations."""
        return self.obs.xy[self.active] - self.model(state)

    def jacobian(self, state: NetworkState) -> sp.csr_matrix:
        """Jacobian of the modeled coordinates (rows interleaved x, y per observation)."""
        K = state.interior
        Ri, Xc = self._camera_coords(state)
        n = len(Xc)
        Z = Xc[:, 2]
        u = Xc[:, :2] / Z[:, None]
        xb = K.c * u
        JD = distortion_jacobian(K, xb[:, 0], xb[:, 1])
        A = JD + np.eye(2)  # d model / d xbar
        iop = np.zeros((n, 2, self.n_iop))
        iop[:, :, 0] = np.einsum("nij,nj->ni", A, u)
        iop[:, 0, 1] = 1.0
        iop[:, 1, 2] = 1.0
        s = (xb[:, 0] ** 2 + xb[:, 1] ** 2) / self.r0**2
        for i in range(self.n_radial):
            iop[:, :, 3 + i] = xb * (s ** (i + 1))[:, None]
        if self.decentering:
            j = 3 + self.n_radial
            x, y = xb[:, 0], xb[:, 1]
            r2 = x * x + y * y
            iop[:, 0, j] = (r2 + 2 * x * x) / self.r0
            iop[:, 1, j] = 2 * x * y / self.r0
            iop[:, 0, j + 1] = 2 * x * y / self.r0
            iop[:, 1, j + 1] = (r2 + 2 * y * y) / self.r0
        du = np.zeros((n, 2, 3))
        du[:, 0, 0] = 1 / Z
        du[:, 1, 1] = 1 / Z
        du[:, 0, 2] = -Xc[:, 0] / Z**2
        du[:, 1, 2] = -Xc[:, 1] / Z**2
        D = K.c * np.einsum("nij,njk->nik", A, du)  # d model / d Xc
        dX = np.einsum("nij,njk->nik", D, Ri)
        sk = np.zeros((n, 3, 3))
        sk[:, 0, 1], sk[:, 0, 2] = -Xc[:, 2], Xc[:, 1]
        sk[:, 1, 0], sk[:, 1, 2] = Xc[:, 2], -Xc[:, 0]
        sk[:, 2, 0], sk[:, 2, 1] = -Xc[:, 1], Xc[:, 0]
        dW = -np.einsum("nij,njk->nik", D, sk)
        blocks = np.concatenate([iop, dW, -dX, dX], axis=2)  # (n, 2, n_iop + 9)
        m = self.active
        cam = self.obs_cam[m]
        pt = self.obs_pt[m]
        cols = np.concatenate(
            [
                np.broadcast_to(np.arange(self.n_iop), (n, self.n_iop)),
                self.cam_offset + 6 * cam[:, None] + np.arange(6),
                self.pt_offset + 3 * pt[:, None] + np.arange(3),
            ],
            axis=1,
        )
        rows = np.repeat(np.arange(2 * n).reshape(n, 2, 1), cols.shape[1], axis=2)
        cols = np.broadcast_to(cols[:, None, :], blocks.shape)
        return sp.csr_matrix(
            (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * n, self.n_params)
        )

    def inner_constraints(self, state: NetworkState) -> np.ndarray:
        """``(7, n_params)`` inner-constraint matrix acting on the object points."""
        _, _, X = self.arrays(state)
        Xr = X - X.mean(axis=0)
        G = np.zeros((DATUM_RANK, self.n_params))
        for k, x in enumerate(Xr):
            cols = slice(self.pt_offset + 3 * k, self.pt_offset + 3 * k + 3)
            G[0:3, cols] = np.eye(3)
            G[3:6, cols] = skew(x)
            G[6, cols] = x
        return G

    def parameter_names(self) -> list[str]:
        names = list(self.iop_names)
        for im in self.images:
            names += [f"image {im} {p}" for p in ("omega_x", "omega_y", "omega_z", "Xc", "Yc", "Zc")]
        for t in self.point_ids:
            names += [f"point {t} {p}" for p in ("X", "Y", "Z")]
        return names

    def normal_equations(self, state: NetworkState):
        J = self.jacobian(state)
        w = np.repeat(self.obs.weight[self.active], 2)
        v = self.residuals(state).ravel()
        JW = J.multiply(w[:, None]).tocsr()
        N = (J.T @ JW).toarray()
        b = J.T @ (w * v)
        return N, b


def normal_matrix(state: NetworkState, obs: ObservationSet, equilibrate: bool = True) -> np.ndarray:
    """Normal matrix without datum constraints (optionally unit-diagonal scaled)."""
    prob = Problem(state, obs)
    N, _ = prob.normal_equations(state)
    if equilibrate:
        s = _scales(N)
        N = N * s[:, None] * s[None, :]
    return N


def _scales(N: np.ndarray) -> np.ndarray:
    d = np.diag(N).copy()
    d[d <= 0] = 1.0
    return 1 / np.sqrt(d)


def _bordered(Nb: np.ndarray, Gb: np.ndarray, mu: float) -> np.ndarray:
    u = Nb.shape[0]
    M = np.zeros((u + DATUM_RANK, u + DATUM_RANK))
    M[:u, :u] = Nb + mu * np.eye(u)
    M[:u, u:] = Gb.T
    M[u:, :u] = Gb
    return M


def _diagnose(prob: Problem, Nb: np.ndarray, Gb: np.ndarray) -> list[str]:
    w, V = np.linalg.eigh(Nb + Gb.T @ Gb)
    tol = 1e-10 * w[-1]
    names = prob.parameter_names()
    bad = []
    for k in np.where(w < tol)[0]:
        bad.append(names[int(np.argmax(np.abs(V[:, k])))])
    return sorted(set(bad))


def bundle_adjust_free(
    observations: ObservationSet | Iterable[Observation],
    initial: NetworkState,
    *,
    max_iter: int = 100,
    tol: float = 1e-10,
    mu0: float = 1e-8,
    mu_max: float = 1e10,
) -> CalibrationSolution:
    """Damped Gauss-Newton (Levenberg-Marquardt) free-network adjustment."""
    obs = observations if isinstance(observations, ObservationSet) else ObservationSet.from_records(observations)
    prob = Problem(initial, obs)
    n_active = int(np.count_nonzero(prob.active))
    redundancy = 2 * n_active - prob.n_params + DATUM_RANK
    if redundancy <= 0:
        raise AdjustmentError(f"insufficient redundancy ({redundancy})")
    if np.any(prob.depths(initial) <= 0):
        raise AdjustmentError("initial network has points behind cameras")

    def cost_of(state):
        v = prob.residuals(state)
        return float(np.sum(obs.weight[prob.active][:, None] * v * v))

    state = initial
    cost = cost_of(state)
    history = [cost]
    mu = mu0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        N, b = prob.normal_equations(state)
        s = _scales(N)
        Nb = N * s[:, None] * s[None, :]
        Gb = prob.inner_constraints(state) * s[None, :]
        rhs = np.concatenate([s * b, np.zeros(DATUM_RANK)])
        while True:
            try:
                y = np.linalg.solve(_bordered(Nb, Gb, mu), rhs)[: prob.n_params]
            except np.linalg.LinAlgError:
                y = None
            if y is None or not np.all(np.isfinite(y)):
                raise AdjustmentError(
                    "singular normal equations", _diagnose(prob, Nb, Gb)
                )
            delta = s * y
            step = float(np.linalg.norm(delta))
            if step < tol and mu <= 1e-3:
                converged = True
                break
            trial = prob.retract(state, delta)
            if np.any(prob.depths(trial) <= 0):
                new_cost = np.inf
            else:
                new_cost = cost_of(trial)
            if new_cost <= cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                state, cost = trial, new_cost
                history.append(cost)
                mu = max(mu / 10, 1e-12)
                if rel < tol:
                    converged = True
                break
            mu *= 10
            if mu > mu_max:
                # no descent direction left: stationary within numerical precision
                grad = float(np.linalg.norm(s * b))
                if grad > 1e-6 * max(1.0, np.sqrt(cost)):
                    raise AdjustmentError(f"adjustment diverged (cost {cost:.6g}, gradient {grad:.3g})")
                converged = True
                break
        if converged:
            break
    if not converged:
        log.warning("bundle adjustment hit the iteration cap (%d)", max_iter)
    return _finalize(prob, state, obs, redundancy, it, converged, history)


def _finalize(prob, state, obs, redundancy, iterations, converged, history) -> CalibrationSolution:
    N, _ = prob.normal_equations(state)
    s = _scales(N)
    Nb = N * s[:, None] * s[None, :]
    Gb = prob.inner_constraints(state) * s[None, :]
    M = _bordered(Nb, Gb, 0.0)
    if np.linalg.cond(M) > 1e14:
        raise AdjustmentError(
            "rank deficiency beyond the 7-parameter datum defect", _diagnose(prob, Nb, Gb)
        )
    Q = np.linalg.inv(M)[: prob.n_params, : prob.n_params] * s[:, None] * s[None, :]
    v = prob.residuals(state)
    w = obs.weight[prob.active]
    sigma0_sq = float(np.sum(w[:, None] * v * v) / redundancy)
    cov = sigma0_sq * Q
    n_iop = prob.n_iop
    std_scaled = np.sqrt(np.clip(np.diag(cov)[:n_iop], 0, None))
    iop_std = {}
    for i, name in enumerate(prob.iop_names):
        if name.startswith("k"):
            p = int(name[1:])
            iop_std[name] = float(std_scaled[i] / prob.r0 ** (2 * p))
        elif name.startswith("p"):
            iop_std[name] = float(std_scaled[i] / prob.r0)
        else:
            iop_std[name] = float(std_scaled[i])
    d = np.sqrt(np.clip(np.diag(Q)[:n_iop], 1e-300, None))
    corr = np.clip(Q[:n_iop, :n_iop] / d[:, None] / d[None, :], -1.0, 1.0)
    residuals = np.full((len(obs), 2), np.nan)
    residuals[prob.active] = v
    point_std = {}
    for t, k in prob.point_index.items():
        j = prob.pt_offset + 3 * k
        point_std[t] = np.sqrt(np.clip(np.diag(cov)[j : j + 3], 0, None))
    return CalibrationSolution(
        interior=state.interior,
        interior_std=iop_std,
        exteriors=state.exteriors,
        points=state.points,
        variance_factor=sigma0_sq,
        iop_names=prob.iop_names,
        iop_correlation=corr,
        residuals=residuals,
        observations=obs,
        redundancy=redundancy,
        iterations=iterations,
        converged=converged,
        cost_history=history,
        point_std=point_std,
    )


def collinearity_residuals(state: NetworkState | CalibrationSolution, observations) -> np.ndarray:
    """Observed minus modeled image coordinates, one row per observation.

    Observations whose point lies behind its camera get NaN rows and are logged.
    """
    if isinstance(state, CalibrationSolution):
        state = state.state
    obs = observations if isinstance(observations, ObservationSet) else ObservationSet.from_records(observations)
    out = np.full((len(obs), 2), np.nan)
    K = state.interior
    for n in range(len(obs)):
        E = state.exteriors[int(obs.image[n])]
        X = np.asarray(state.points[obs.targets[int(obs.point[n])]], dtype=float)
        Xc = E.to_camera(X)
        if Xc[2] <= 0:
            log.warning("observation %d: point behind image %d, excluded", n, obs.image[n])
            continue
        out[n] = obs.xy[n] - Problem._project(K, Xc[None, :])[0]
    return out


def radial_profile(state: NetworkState, obs: ObservationSet, residuals: np.ndarray):
    """Radial residual component ``v_r`` against radial distance ``r`` from the principal point."""
    m = (obs.weight > 0) & np.all(np.isfinite(residuals), axis=1)
    K = state.interior
    modeled = obs.xy[m] - residuals[m]
    rel = modeled - np.array([K.xp, K.yp])
    r = np.linalg.norm(rel, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        vr = np.where(r > 0, np.sum(residuals[m] * rel, axis=1) / r, 0.0)
    order = np.argsort(r, kind="stable")
    return r[order], vr[order]


def transform_state(state: NetworkState, scale: float, rotation, translation) -> NetworkState:
    """Apply the similarity ``X' = s Q X + T`` to every object point and camera."""
    Q = np.asarray(rotation, dtype=float)
    T = np.asarray(translation, dtype=float)
    ext = {
        i: ExteriorParams(E.rotation @ Q.T, scale * Q @ E.center + T)
        for i, E in state.exteriors.items()
    }
    pts = {t: scale * Q @ np.asarray(X, float) + T for t, X in state.points.items()}
    return NetworkState(state.interior, ext, pts)


def state_from_mapping(interior: InteriorParams, exteriors: Mapping[int, ExteriorParams], points) -> NetworkState:
    return NetworkState(interior, dict(exteriors), {t: np.asarray(X, float) for t, X in points.items()})
