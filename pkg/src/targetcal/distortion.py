"""Polynomial radial and Brown decentering lens distortion.

Coordinates are image coordinates relative to the principal point, in pixels.
The model is applied as ``observed = ideal + delta(ideal)``; the radial part is
the unbalanced odd polynomial ``k1 r^3 + k2 r^5 + ...`` along the radius.
"""

from __future__ import annotations

import numpy as np


def _coeffs(interior) -> tuple[np.ndarray, float, float]:
    k = np.asarray(interior.radial, dtype=float)
    if interior.decentering is None:
        return k, 0.0, 0.0
    p1, p2 = interior.decentering
    return k, float(p1), float(p2)


def distortion_delta(interior, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dx, dy)`` for ideal coordinates ``(x, y)`` relative to the principal point."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k, p1, p2 = _coeffs(interior)
    r2 = x * x + y * y
    f = np.zeros_like(r2)
    for kk in k[::-1]:
        f = (f + kk) * r2
    dx = x * f + p1 * (r2 + 2 * x * x) + 2 * p2 * x * y
    dy = y * f + p2 * (r2 + 2 * y * y) + 2 * p1 * x * y
    return dx, dy


def distortion_jacobian(interior, x, y) -> np.ndarray:
    """Jacobian of ``(dx, dy)`` with respect to ``(x, y)``; shape ``(..., 2, 2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k, p1, p2 = _coeffs(interior)
    r2 = x * x + y * y
    f = np.zeros_like(r2)
    fp = np.zeros_like(r2)  # df/d(r2)
    for i, kk in enumerate(k, start=1):
        f = f + kk * r2**i
        fp = fp + i * kk * r2 ** (i - 1)
    J = np.empty(x.shape + (2, 2))
    J[..., 0, 0] = f + 2 * x * x * fp + 6 * p1 * x + 2 * p2 * y
    J[..., 0, 1] = 2 * x * y * fp + 2 * p1 * y + 2 * p2 * x
    J[..., 1, 0] = 2 * x * y * fp + 2 * p2 * x + 2 * p1 * y
    J[..., 1, 1] = f + 2 * y * y * fp + 6 * p2 * y + 2 * p1 * x
    return J


def distort(interior, xy) -> np.ndarray:
    """Map ideal pixel coordinates to observed (distorted) pixel coordinates."""
    xy = np.asarray(xy, dtype=float)
    xb = xy[..., 0] - interior.xp
    yb = xy[..., 1] - interior.yp
    dx, dy = distortion_delta(interior, xb, yb)
    return np.stack([xy[..., 0] + dx, xy[..., 1] + dy], axis=-1)


def undistort(interior, xy, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration."""
    xy = np.asarray(xy, dtype=float)
    if not interior.has_distortion:
        return xy.copy()
    obs = np.stack([xy[..., 0] - interior.xp, xy[..., 1] - interior.yp], axis=-1)
    u = obs.copy()
    for _ in range(max_iter):
        dx, dy = distortion_delta(interior, u[..., 0], u[..., 1])
        res = obs - u - np.stack([dx, dy], axis=-1)
        J = distortion_jacobian(interior, u[..., 0], u[..., 1])
        J[..., 0, 0] += 1.0
        J[..., 1, 1] += 1.0
        step = np.linalg.solve(J, res[..., None])[..., 0]
        u = u + step
        if np.max(np.abs(step), initial=0.0) < tol:
            break
    return np.stack([u[..., 0] + interior.xp, u[..., 1] + interior.yp], axis=-1)
