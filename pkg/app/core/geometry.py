# app/core/geometry.py
"""
Quaternion / rotation algebra and spherical mappings.

Convention: Hamilton product, scalar-first (w, x, y, z), world-from-body.
Exp maps a rotation vector (axis * angle, radians) to a unit quaternion, so
Exp((pi, 0, 0)) = (0, 1, 0, 0). Every quaternion function accepts a single
(4,) array or a stack (..., 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# [0 | 2I] and [0 ; I/2]: tangent maps at the identity quaternion.
_UNLIFT_AT_IDENTITY = np.hstack([np.zeros((3, 1)), 2.0 * np.eye(3)])
_LIFT_AT_IDENTITY = np.vstack([np.zeros((1, 3)), 0.5 * np.eye(3)])


@dataclass(frozen=True)
class SphericalCoord:
    range_m: float
    azimuth_rad: float
    elevation_rad: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.range_m) or self.range_m <= 0.0:
            raise ValueError(f"range must be finite and positive, got {self.range_m}")
        if abs(self.elevation_rad) >= np.pi / 2:
            raise ValueError(f"|elevation| must be < pi/2, got {self.elevation_rad}")


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def canonical_sign(vec: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip ``vec`` so its first non-negligible component is positive."""
    for value in vec:
        if abs(value) > tol:
            return vec if value > 0 else -vec
    return vec


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = (q[..., i] for i in range(4))
    w2, x2, y2, z2 = (p[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_exp(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(theta / 2.0))
    scale = np.where(small, 0.5 - theta**2 / 48.0, np.sin(theta / 2.0) / safe)
    q = np.concatenate([w[..., None], scale[..., None] * v], axis=-1)
    return quat_normalize(q)


def _double_cover_flip(q: np.ndarray) -> np.ndarray:
    """Boolean mask of quaternions to negate so that w >= 0 (ties broken on xyz)."""
    w = q[..., 0]
    xyz = q[..., 1:]
    nonzero = np.abs(xyz) > 0.0
    first = np.argmax(nonzero, axis=-1)
    lead = np.take_along_axis(xyz, first[..., None], axis=-1)[..., 0]
    return (w < 0.0) | ((w == 0.0) & (lead < 0.0))


def quat_log(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = np.where(_double_cover_flip(q)[..., None], -q, q)
    w = q[..., 0]
    xyz = q[..., 1:]
    n = np.linalg.norm(xyz, axis=-1)
    small = n < SMALL_ANGLE
    factor = np.where(small, 2.0 / np.where(small, w, 1.0), 2.0 * np.arctan2(n, w) / np.where(small, 1.0, n))
    return factor[..., None] * xyz


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """[q]_L with [q]_L p = q (x) p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """[q]_R with [q]_R p = p (x) q."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def quat_exp_jacobian(v: np.ndarray) -> np.ndarray:
    """d Exp(v) / dv, shape (4, 3)."""
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    jac = np.empty((4, 3))
    if theta < SMALL_ANGLE:
        jac[0] = -0.25 * v
        jac[1:] = 0.5 * np.eye(3) - (theta**2 * np.eye(3) + 2.0 * np.outer(v, v)) / 48.0
        return jac
    n = v / theta
    s = np.sin(theta / 2.0)
    c = np.cos(theta / 2.0)
    nn = np.outer(n, n)
    jac[0] = -0.5 * s * n
    jac[1:] = (s / theta) * (np.eye(3) - nn) + 0.5 * c * nn
    return jac


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    u = q[..., 1:]
    eye = np.broadcast_to(np.eye(3), q.shape[:-1] + (3, 3))
    uu = np.einsum("...i,...j->...ij", u, u)
    ux = np.zeros(q.shape[:-1] + (3, 3))
    ux[..., 0, 1], ux[..., 0, 2] = -u[..., 2], u[..., 1]
    ux[..., 1, 0], ux[..., 1, 2] = u[..., 2], -u[..., 0]
    ux[..., 2, 0], ux[..., 2, 1] = -u[..., 1], u[..., 0]
    dot = np.einsum("...i,...i->...", u, u)
    return (w**2 - dot)[..., None, None] * eye + 2.0 * uu + 2.0 * w[..., None, None] * ux


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(rot).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(_double_cover_flip(q)[..., None], -q, q)


def rotate_jacobian(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """d(R(q) v)/dq, shape (3, 4), for the quadratic form of R(q)."""
    w = q[0]
    u = q[1:]
    jac = np.empty((3, 4))
    jac[:, 0] = 2.0 * (w * v + np.cross(u, v))
    jac[:, 1:] = 2.0 * (np.dot(u, v) * np.eye(3) + np.outer(u, v) - np.outer(v, u) - w * skew(v))
    return jac


def rotate_transpose_jacobian(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """d(R(q)^T v)/dq, shape (3, 4)."""
    return rotate_jacobian(quat_conj(q), v) * np.array([1.0, -1.0, -1.0, -1.0])


def tangent_lift(q: np.ndarray) -> np.ndarray:
    """d(q (x) Exp(d))/dd at d = 0, shape (4, 3)."""
    return quat_left_matrix(q) @ _LIFT_AT_IDENTITY


def tangent_unlift(q: np.ndarray) -> np.ndarray:
    """d Log(q_ref^-1 (x) p)/dp at p = q_ref, shape (3, 4)."""
    return _UNLIFT_AT_IDENTITY @ quat_left_matrix(quat_conj(q))


def spherical_to_cartesian(s: SphericalCoord) -> np.ndarray:
    return spherical_to_cartesian_array(s.range_m, s.azimuth_rad, s.elevation_rad)


def spherical_to_cartesian_array(r, azimuth, elevation) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    ce = np.cos(elevation)
    return np.stack([r * ce * np.cos(azimuth), r * ce * np.sin(azimuth), r * np.sin(elevation)], axis=-1)


def cartesian_to_spherical_array(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    r = np.linalg.norm(p, axis=-1)
    azimuth = np.arctan2(p[..., 1], p[..., 0])
    elevation = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    return r, azimuth, elevation


def cartesian_to_spherical(p: np.ndarray) -> SphericalCoord:
    r, a, e = cartesian_to_spherical_array(p)
    return SphericalCoord(float(r), float(a), float(e))


def spherical_jacobian(s: SphericalCoord) -> np.ndarray:
    return spherical_jacobian_array(s.range_m, s.azimuth_rad, s.elevation_rad)


def spherical_jacobian_array(r, azimuth, elevation) -> np.ndarray:
    """Gamma = d(x, y, z)/d(r, a, e); shape (..., 3, 3)."""
    r = np.asarray(r, dtype=float)
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    gamma = np.zeros(r.shape + (3, 3))
    gamma[..., 0, 0] = ce * ca
    gamma[..., 1, 0] = ce * sa
    gamma[..., 2, 0] = se
    gamma[..., 0, 1] = -r * ce * sa
    gamma[..., 1, 1] = r * ce * ca
    gamma[..., 0, 2] = -r * se * ca
    gamma[..., 1, 2] = -r * se * sa
    gamma[..., 2, 2] = r * ce
    return gamma
