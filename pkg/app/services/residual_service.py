# app/services/residual_service.py
"""
Measurement models for the IEKF: point-to-plane, point-to-distribution,
Doppler, gyroscope and gravity direction.

Each builder returns a ResidualBlock holding weight * (z - h(x)), the
Jacobian weight * dh/dx over the 30-dim state and the measurement covariance.
Radar points are given in the radar frame and mapped through the
radar-to-IMU extrinsics before the spline pose is applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.geometry import rotate_jacobian, rotate_transpose_jacobian, skew
from app.core.spline import PoseTerms, SplineWindow, pose_terms
from app.models.domain import (
    STATE_DIM,
    EnvWeights,
    Extrinsics,
    PlaneFit,
    RcsDistribution,
    ResidualBlock,
)

logger = logging.getLogger(__name__)

MIN_VARIANCE = 1e-12
DEGENERATE_SPREAD = 1e-9


def _terms(window: Optional[SplineWindow], t: float, terms: Optional[PoseTerms]) -> PoseTerms:
    if terms is not None and terms.dq_dxq is not None:
        return terms
    return pose_terms(window, t)


def _state_rows(
    dp: Optional[np.ndarray] = None,
    dq: Optional[np.ndarray] = None,
    dba: Optional[np.ndarray] = None,
    dbg: Optional[np.ndarray] = None,
    rows: int = 1,
) -> np.ndarray:
    H = np.zeros((rows, STATE_DIM))
    if dp is not None:
        H[:, 0:12] = dp
    if dq is not None:
        H[:, 12:24] = dq
    if dba is not None:
        H[:, 24:27] = dba
    if dbg is not None:
        H[:, 27:30] = dbg
    return H


def world_point(terms: PoseTerms, point_radar: np.ndarray, extrinsics: Extrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(p_W, p_I) for a radar-frame point at the pose in ``terms``."""
    point_imu = extrinsics.rotation @ point_radar + extrinsics.translation
    return terms.position + terms.rotation @ point_imu, point_imu


def world_point_jacobian(terms: PoseTerms, point_imu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dp_W/dx^p, dp_W/dx^q), each 3x12."""
    return terms.B, rotate_jacobian(terms.quat, point_imu) @ terms.dq_dxq


def fit_plane(
    positions: np.ndarray,
    covariances: np.ndarray,
    tau_u: float,
    tau_pl: float,
    rms_bound: float = 0.2,
    gate: Optional[float] = None,
) -> PlaneFit:
    """Uncertainty-weighted plane through the neighbours; unreliable if degenerate or too uncertain.

    With ``gate`` set, every neighbour must also lie within ``gate`` standard
    deviations (its own covariance along the normal) of the fitted plane.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    covariances = np.asarray(covariances, dtype=float).reshape(-1, 3, 3)
    traces = np.trace(covariances, axis1=1, axis2=2)
    margins = np.clip(tau_u - traces, 0.0, None)
    total = margins.sum()
    count = positions.shape[0]
    if total <= 0.0:
        weights = np.full(count, 1.0 / count)
    else:
        weights = margins / total
    centroid = weights @ positions
    plane_cov = np.einsum("i,ijk->jk", weights**2, covariances)

    centered = positions - positions.mean(axis=0)
    spread = np.linalg.svd(centered, compute_uv=False)
    if count < 3 or total <= 0.0 or spread[1] <= DEGENERATE_SPREAD * max(spread[0], 1.0):
        return PlaneFit(np.zeros(3), centroid, plane_cov, False, float("inf"), weights)

    offsets = positions - centroid
    scatter = np.einsum("i,ij,ik->jk", weights, offsets, offsets)
    _, vectors = np.linalg.eigh(scatter)
    normal = vectors[:, 0]
    for value in normal:
        if abs(value) > 1e-12:
            normal = normal if value > 0 else -normal
            break
    distances = offsets @ normal
    rms = float(np.sqrt(np.mean(distances**2)))
    reliable = bool(np.trace(plane_cov) <= tau_pl and rms <= rms_bound)
    if reliable and gate is not None:
        spread_along = np.einsum("j,ijk,k->i", normal, covariances, normal)
        reliable = bool(np.all(distances**2 <= gate**2 * np.maximum(spread_along, MIN_VARIANCE)))
    return PlaneFit(normal, centroid, plane_cov, reliable, rms, weights)


def within_gate(value: float, variance: float, gate: float) -> bool:
    """|value| inside ``gate`` standard deviations."""
    return bool(value * value <= gate * gate * max(variance, MIN_VARIANCE))


def rcs_distribution(positions: np.ndarray, rcs: np.ndarray) -> RcsDistribution:
    """RCS-weighted centroid of the neighbours; plain mean when any RCS is non-positive."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    rcs = np.asarray(rcs, dtype=float).reshape(-1)
    if np.all(rcs > 0.0):
        centroid = (rcs @ positions) / rcs.sum()
    else:
        centroid = positions.mean(axis=0)
    return RcsDistribution(centroid, float(rcs.mean()), rcs)


def rcs_weight(mean_rcs: float, point_rcs: float, floor: float = 0.5, cap: float = 2.0) -> float:
    return float(min(1.0 / max(abs(mean_rcs - point_rcs), floor), cap))


def env_weights(n_plane: int, n_point: int) -> EnvWeights:
    total = n_plane + n_point
    if total <= 0:
        logger.warning("No plane or distribution correspondences; using equal environment weights")
        return EnvWeights(0.5, 0.5)
    return EnvWeights(n_plane / total, n_point / total)


def plane_residual(
    window: Optional[SplineWindow],
    t: float,
    point_radar: np.ndarray,
    plane: PlaneFit,
    extrinsics: Extrinsics,
    *,
    weight: float = 1.0,
    point_cov: Optional[np.ndarray] = None,
    terms: Optional[PoseTerms] = None,
) -> ResidualBlock:
    pt = _terms(window, t, terms)
    p_world, p_imu = world_point(pt, point_radar, extrinsics)
    dp, dq = world_point_jacobian(pt, p_imu)
    n = plane.normal
    h = float(n @ (p_world - plane.point))
    variance = float(n @ plane.covariance @ n)
    if point_cov is not None:
        variance += float(n @ point_cov @ n)
    H = _state_rows(dp=n @ dp, dq=n @ dq)
    return ResidualBlock(np.array([-h * weight]), H * weight, np.array([[max(variance, MIN_VARIANCE)]]), "plane")


def distribution_residual(
    window: Optional[SplineWindow],
    t: float,
    point_radar: np.ndarray,
    dist: RcsDistribution,
    extrinsics: Extrinsics,
    *,
    point_rcs: float,
    point_cov: np.ndarray,
    weight: float = 1.0,
    rcs_floor: float = 0.5,
    rcs_cap: float = 2.0,
    terms: Optional[PoseTerms] = None,
) -> Optional[ResidualBlock]:
    """None when the point sits on the centroid, where the direction is undefined."""
    pt = _terms(window, t, terms)
    p_world, p_imu = world_point(pt, point_radar, extrinsics)
    diff = p_world - dist.centroid
    distance = float(np.linalg.norm(diff))
    if distance < 1e-9:
        return None
    direction = diff / distance
    w_rcs = rcs_weight(dist.mean_rcs, point_rcs, rcs_floor, rcs_cap)
    dp, dq = world_point_jacobian(pt, p_imu)
    H = _state_rows(dp=direction @ dp, dq=direction @ dq) * w_rcs
    variance = float(direction @ point_cov @ direction)
    return ResidualBlock(
        np.array([-w_rcs * distance * weight]),
        H * weight,
        np.array([[max(variance, MIN_VARIANCE)]]),
        "distribution",
    )


def predicted_doppler(terms: PoseTerms, direction_radar: np.ndarray, extrinsics: Extrinsics, sign: float = -1.0) -> float:
    direction = extrinsics.rotation @ direction_radar
    velocity = terms.rotation.T @ terms.velocity + np.cross(terms.angular_velocity, extrinsics.translation)
    return float(sign * direction @ velocity)


def doppler_residual(
    window: Optional[SplineWindow],
    t: float,
    point_radar: np.ndarray,
    doppler: float,
    extrinsics: Extrinsics,
    *,
    sigma: float,
    sign: float = -1.0,
    terms: Optional[PoseTerms] = None,
) -> ResidualBlock:
    pt = _terms(window, t, terms)
    direction_radar = point_radar / np.linalg.norm(point_radar)
    direction = sign * (extrinsics.rotation @ direction_radar)
    h = predicted_doppler(pt, direction_radar, extrinsics, sign)
    g1 = pt.rotation.T @ pt.B_dot
    g2 = rotate_transpose_jacobian(pt.quat, pt.velocity) @ pt.dq_dxq - skew(extrinsics.translation) @ pt.domega_dxq
    H = _state_rows(dp=direction @ g1, dq=direction @ g2)
    return ResidualBlock(np.array([doppler - h]), H, np.array([[sigma**2]]), "doppler")


def gyro_residual(
    window: Optional[SplineWindow],
    t: float,
    omega_meas: np.ndarray,
    gyro_bias: np.ndarray,
    *,
    sigma: float,
    terms: Optional[PoseTerms] = None,
) -> ResidualBlock:
    pt = _terms(window, t, terms)
    h = pt.angular_velocity + gyro_bias
    H = _state_rows(dq=pt.domega_dxq, dbg=np.eye(3), rows=3)
    return ResidualBlock(np.asarray(omega_meas, dtype=float) - h, H, sigma**2 * np.eye(3), "gyro")


def gravity_vector(terms: PoseTerms, accel_meas: np.ndarray, accel_bias: np.ndarray) -> np.ndarray:
    return terms.rotation @ (accel_meas - accel_bias) - terms.acceleration


def gravity_residual(
    window: Optional[SplineWindow],
    t: float,
    accel_meas: np.ndarray,
    accel_bias: np.ndarray,
    gravity_world: np.ndarray,
    *,
    sigma: float,
    min_norm: float = 1.0,
    terms: Optional[PoseTerms] = None,
) -> Optional[ResidualBlock]:
    """1 - cos between the estimated and the world gravity direction; None near free fall."""
    pt = _terms(window, t, terms)
    accel_meas = np.asarray(accel_meas, dtype=float)
    g = gravity_vector(pt, accel_meas, accel_bias)
    norm = float(np.linalg.norm(g))
    if norm <= min_norm:
        return None
    g_hat = g / norm
    ref = np.asarray(gravity_world, dtype=float)
    ref = ref / np.linalg.norm(ref)
    h = 1.0 - float(ref @ g_hat)
    dh_dg = -(ref @ (np.eye(3) - np.outer(g_hat, g_hat))) / norm
    dg_dp = -pt.B_ddot
    dg_dq = rotate_jacobian(pt.quat, accel_meas - accel_bias) @ pt.dq_dxq
    dg_dba = -pt.rotation
    H = _state_rows(dp=dh_dg @ dg_dp, dq=dh_dg @ dg_dq, dba=dh_dg @ dg_dba)
    return ResidualBlock(np.array([-h]), H, np.array([[sigma**2]]), "gravity")


@dataclass(frozen=True)
class PlaneCorrespondence:
    index: int
    plane: PlaneFit


@dataclass(frozen=True)
class DistributionCorrespondence:
    index: int
    dist: RcsDistribution
