# app/services/uncertainty_service.py
"""
First-order propagation of control-point uncertainty to the pose at any time,
and of pose plus per-return measurement noise to world-frame point covariance.

Orientation covariances cross module boundaries as 3x3 rotation-vector
covariances of a right (body-frame) perturbation q = q_bar (x) Exp(d).
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from app.core.geometry import (
    SphericalCoord,
    spherical_jacobian,
    spherical_jacobian_array,
    tangent_lift,
    tangent_unlift,
)
from app.core.spline import PoseTerms, SplineWindow, pose_terms
from app.models.domain import Extrinsics, FilterState, PoseCovariance, WorldPointCovariance, state_to_window

logger = logging.getLogger(__name__)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def translation_covariance(window: SplineWindow, knot_covs: Sequence[np.ndarray], t: float) -> np.ndarray:
    """Sigma_t(t) = sum_k m_k(u)^2 Sigma_k."""
    m = pose_terms(window, t, jacobians=False).weights.m
    out = np.zeros((3, 3))
    for k in range(4):
        out += m[k] ** 2 * np.asarray(knot_covs[k], dtype=float)
    return _sym(out)


def translation_covariance_full(window: SplineWindow, stacked_cov: np.ndarray, t: float) -> np.ndarray:
    """B(u) Sigma_12 B(u)^T over the full 12x12 translation block."""
    B = pose_terms(window, t, jacobians=False).B
    return _sym(B @ stacked_cov @ B.T)


def orientation_covariance(
    window: SplineWindow,
    increment_covs: Sequence[np.ndarray],
    lag_cov: np.ndarray,
    t: float,
    terms: Optional[PoseTerms] = None,
) -> np.ndarray:
    """4x4 quaternion-space covariance: sum_j J_j S_j J_j^T + J_lag G S_lag G^T J_lag^T."""
    if terms is None or terms.dq_dxq is None:
        terms = pose_terms(window, t)
    out = np.zeros((4, 4))
    for j in range(4):
        J = terms.dq_dxq[:, 3 * j : 3 * j + 3]
        out += J @ np.asarray(increment_covs[j], dtype=float) @ J.T
    lag = terms.dq_dlag @ tangent_lift(window.lag_quat)
    out += lag @ np.asarray(lag_cov, dtype=float) @ lag.T
    return _sym(out)


def quat_cov_to_rotvec_cov(q: np.ndarray, quat_cov: np.ndarray) -> np.ndarray:
    J = tangent_unlift(q)
    return _sym(J @ quat_cov @ J.T)


def measurement_covariance(s: SphericalCoord, sigma_r: float, sigma_a: float, sigma_e: float) -> np.ndarray:
    gamma = spherical_jacobian(s)
    return _sym(gamma @ np.diag([sigma_r**2, sigma_a**2, sigma_e**2]) @ gamma.T)


def measurement_covariances(ranges, azimuths, elevations, sigma_r: float, sigma_a: float, sigma_e: float) -> np.ndarray:
    gamma = spherical_jacobian_array(ranges, azimuths, elevations)
    scale = np.array([sigma_r**2, sigma_a**2, sigma_e**2])
    return _sym(np.einsum("nij,j,nkj->nik", gamma, scale, gamma))


def world_point_covariance(
    pose: PoseCovariance,
    rotation: np.ndarray,
    extrinsics: Extrinsics,
    point_imu: np.ndarray,
    measurement_cov: np.ndarray,
) -> WorldPointCovariance:
    px = _skew_batch(np.asarray(point_imu, dtype=float))
    imu_cov = extrinsics.rotation @ measurement_cov @ extrinsics.rotation.T
    rot_term = rotation @ px @ pose.rotation @ px.T @ rotation.T
    cov = _sym(pose.translation + rot_term + rotation @ imu_cov @ rotation.T)
    return WorldPointCovariance(cov, float(np.trace(cov)))


class UncertaintyService:
    """Propagates filter uncertainty into per-point world covariances for one scan."""

    def __init__(
        self,
        sigma_range: float,
        sigma_azimuth: float,
        sigma_elevation: float,
        mode: str = "full",
        fallback_sigma: float = 0.1,
    ) -> None:
        self.sigma_range = sigma_range
        self.sigma_azimuth = sigma_azimuth
        self.sigma_elevation = sigma_elevation
        self.mode = mode
        self.fallback_sigma = fallback_sigma

    def pose_covariance(self, state: FilterState, t: float, terms: Optional[PoseTerms] = None) -> PoseCovariance:
        window = state_to_window(state)
        if terms is None or terms.dq_dxq is None:
            terms = pose_terms(window, t)
        m = terms.weights.m
        trans = np.zeros((3, 3))
        for k, cov in enumerate(state.translation_covs()):
            trans += m[k] ** 2 * cov
        quat_cov = orientation_covariance(window, state.increment_covs(), state.lag_cov, t, terms=terms)
        return PoseCovariance(_sym(trans), quat_cov_to_rotvec_cov(terms.quat, quat_cov), quat_cov)

    def scan_covariances(
        self,
        state: FilterState,
        terms: Sequence[PoseTerms],
        points_radar: np.ndarray,
        ranges: np.ndarray,
        azimuths: np.ndarray,
        elevations: np.ndarray,
        extrinsics: Extrinsics,
    ) -> np.ndarray:
        """World covariance (N, 3, 3) for each return; ``terms[i]`` is the pose at the return's time."""
        n = len(terms)
        if n == 0:
            return np.zeros((0, 3, 3))
        if self.mode == "none":
            return np.broadcast_to(self.fallback_sigma**2 * np.eye(3), (n, 3, 3)).copy()

        meas = measurement_covariances(ranges, azimuths, elevations, self.sigma_range, self.sigma_azimuth, self.sigma_elevation)
        rotations = np.stack([pt.rotation for pt in terms])
        full_rot = np.einsum("nij,jk->nik", rotations, extrinsics.rotation)
        out = np.einsum("nij,njk,nlk->nil", full_rot, meas, full_rot)
        if self.mode == "measurement":
            return _sym(out)

        points_imu = points_radar @ extrinsics.rotation.T + extrinsics.translation
        pose_by_time: dict[float, PoseCovariance] = {}
        for i, pt in enumerate(terms):
            pose = pose_by_time.get(pt.t)
            if pose is None:
                pose = self.pose_covariance(state, pt.t, terms=pt)
                pose_by_time[pt.t] = pose
            px = _skew_batch(points_imu[i])
            A = rotations[i] @ px
            out[i] += pose.translation + A @ pose.rotation @ A.T
        return _sym(out)
