# tests/test_uncertainty.py
from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.spatial.transform import Rotation

from app.core.geometry import (
    IDENTITY_QUAT,
    SphericalCoord,
    quat_conj,
    quat_exp,
    quat_left_matrix,
    quat_log,
    quat_mul,
    quat_to_rotmat,
    spherical_to_cartesian_array,
    tangent_lift,
)
from app.core.spline import SplineWindow, eval_orientation, pose_terms
from app.models.domain import Extrinsics, PoseCovariance, state_to_window
from app.services.uncertainty_service import (
    UncertaintyService,
    measurement_covariance,
    orientation_covariance,
    quat_cov_to_rotvec_cov,
    translation_covariance,
    translation_covariance_full,
    world_point_covariance,
)
from tests.helpers import random_spd, window_time


def frobenius_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - reference) / np.linalg.norm(reference))


def test_equal_knot_covariances_at_segment_start(window, rng):
    sigma = random_spd(rng, 3)
    out = translation_covariance(window, [sigma] * 4, window.start)
    np.testing.assert_allclose(out, 0.5 * sigma, atol=1e-12)


def test_single_knot_covariance(window, rng):
    sigma = random_spd(rng, 3)
    t = window_time(window, 0.4)
    m = pose_terms(window, t, jacobians=False).weights.m
    covs = [np.zeros((3, 3))] * 4
    covs[2] = sigma
    np.testing.assert_allclose(translation_covariance(window, covs, t), m[2] ** 2 * sigma, atol=1e-12)


def test_full_and_summed_translation_forms_agree(window, rng):
    covs = [random_spd(rng, 3) for _ in range(4)]
    t = window_time(window, 0.7)
    np.testing.assert_allclose(
        translation_covariance_full(window, block_diag(*covs), t),
        translation_covariance(window, covs, t),
        atol=1e-12,
    )


def test_zero_orientation_covariance(window):
    zeros = [np.zeros((3, 3))] * 4
    out = orientation_covariance(window, zeros, np.zeros((3, 3)), window_time(window, 0.5))
    np.testing.assert_array_equal(out, np.zeros((4, 4)))


def test_newest_increment_only_on_identity_window():
    window = SplineWindow([0.0, 0.1, 0.2, 0.3], np.zeros((4, 3)), np.zeros((4, 3)))
    sigma = np.diag([1e-4, 2e-4, 3e-4])
    covs = [np.zeros((3, 3))] * 3 + [sigma]
    t = 0.25
    lam = pose_terms(window, t, jacobians=False).weights.lam
    out = orientation_covariance(window, covs, np.zeros((3, 3)), t)
    lift = tangent_lift(IDENTITY_QUAT)
    np.testing.assert_allclose(out, lam[3] ** 2 * lift @ sigma @ lift.T, atol=1e-15)
    np.testing.assert_allclose(quat_cov_to_rotvec_cov(IDENTITY_QUAT, out), lam[3] ** 2 * sigma, atol=1e-15)


def test_rotvec_conversion_round_trip(rng):
    q = quat_exp(rng.normal(size=3))
    sigma = random_spd(rng, 3, 1e-4)
    lift = tangent_lift(q)
    np.testing.assert_allclose(quat_cov_to_rotvec_cov(q, lift @ sigma @ lift.T), sigma, atol=1e-15)
    np.testing.assert_array_equal(quat_cov_to_rotvec_cov(q, np.zeros((4, 4))), np.zeros((3, 3)))


def test_measurement_covariance_on_x_axis():
    out = measurement_covariance(SphericalCoord(1.0, 0.0, 0.0), 0.1, 0.02, 0.03)
    np.testing.assert_allclose(out, np.diag([0.01, 0.0004, 0.0009]), atol=1e-15)


def test_measurement_covariance_scales_tangentially():
    near = measurement_covariance(SphericalCoord(5.0, 0.0, 0.0), 0.1, 0.02, 0.03)
    far = measurement_covariance(SphericalCoord(10.0, 0.0, 0.0), 0.1, 0.02, 0.03)
    assert far[0, 0] == pytest.approx(near[0, 0])
    assert far[1, 1] == pytest.approx(4.0 * near[1, 1])
    assert far[2, 2] == pytest.approx(4.0 * near[2, 2])


def test_world_covariance_reductions(rng):
    R = quat_to_rotmat(quat_exp(rng.normal(size=3)))
    meas = random_spd(rng, 3, 0.01)
    zero_pose = PoseCovariance(np.zeros((3, 3)), np.zeros((3, 3)))
    out = world_point_covariance(zero_pose, R, Extrinsics(), rng.normal(size=3), meas)
    np.testing.assert_allclose(out.covariance, R @ meas @ R.T, atol=1e-15)
    pose = PoseCovariance(random_spd(rng, 3, 0.01), random_spd(rng, 3, 0.01))
    at_origin = world_point_covariance(pose, R, Extrinsics(), np.zeros(3), meas)
    np.testing.assert_allclose(at_origin.covariance, pose.translation + R @ meas @ R.T, atol=1e-15)
    assert at_origin.trace == pytest.approx(np.trace(at_origin.covariance))


def test_world_covariance_is_monotone_in_inputs(rng):
    R = quat_to_rotmat(quat_exp(rng.normal(size=3)))
    meas = random_spd(rng, 3, 0.01)
    point = rng.normal(scale=10.0, size=3)
    base = PoseCovariance(random_spd(rng, 3, 0.01), random_spd(rng, 3, 1e-4))
    reference = world_point_covariance(base, R, Extrinsics(), point, meas).trace
    bump = random_spd(rng, 3, 1e-3)
    assert world_point_covariance(PoseCovariance(base.translation + bump, base.rotation), R, Extrinsics(), point, meas).trace >= reference
    assert world_point_covariance(PoseCovariance(base.translation, base.rotation + bump), R, Extrinsics(), point, meas).trace >= reference
    assert world_point_covariance(base, R, Extrinsics(), point, meas + bump).trace >= reference


def test_service_modes(state, rng):
    service = UncertaintyService(0.1, np.deg2rad(1.0), np.deg2rad(1.0), mode="full", fallback_sigma=0.2)
    window = state_to_window(state)
    terms = [pose_terms(window, window_time(window, u)) for u in (0.1, 0.1, 0.6)]
    ranges = np.array([5.0, 10.0, 20.0])
    az = np.array([0.1, -0.2, 0.4])
    el = np.array([0.0, 0.05, -0.1])
    points = spherical_to_cartesian_array(ranges, az, el)
    full = service.scan_covariances(state, terms, points, ranges, az, el, Extrinsics())
    service.mode = "measurement"
    meas = service.scan_covariances(state, terms, points, ranges, az, el, Extrinsics())
    service.mode = "none"
    none = service.scan_covariances(state, terms, points, ranges, az, el, Extrinsics())
    assert full.shape == meas.shape == none.shape == (3, 3, 3)
    np.testing.assert_allclose(none, np.broadcast_to(0.04 * np.eye(3), (3, 3, 3)))
    for i in range(3):
        assert np.trace(full[i]) > np.trace(meas[i])
        assert np.linalg.eigvalsh(full[i]).min() > 0.0
        np.testing.assert_allclose(full[i], full[i].T, atol=1e-15)


def test_service_pose_covariance_matches_components(state):
    service = UncertaintyService(0.1, 0.01, 0.01)
    window = state_to_window(state)
    t = window_time(window, 0.3)
    pose = service.pose_covariance(state, t)
    np.testing.assert_allclose(pose.translation, translation_covariance(window, state.translation_covs(), t), atol=1e-15)
    quat_cov = orientation_covariance(window, state.increment_covs(), state.lag_cov, t)
    np.testing.assert_allclose(pose.quaternion, quat_cov, atol=1e-15)
    np.testing.assert_allclose(pose.rotation, quat_cov_to_rotvec_cov(pose_terms(window, t).quat, quat_cov), atol=1e-15)


@pytest.mark.slow
def test_translation_covariance_monte_carlo(window, rng):
    covs = [random_spd(rng, 3, 0.01) for _ in range(4)]
    t = window_time(window, 0.35)
    m = pose_terms(window, t, jacobians=False).weights.m
    draws = 100_000
    samples = np.zeros((draws, 3))
    for k in range(4):
        noise = rng.multivariate_normal(np.zeros(3), covs[k], size=draws)
        samples += m[k] * (window.control_points[k] + noise)
    estimate = np.cov(samples, rowvar=False)
    assert frobenius_error(estimate, translation_covariance(window, covs, t)) < 0.05


@pytest.mark.slow
def test_orientation_covariance_monte_carlo(window, rng):
    covs = [np.diag(rng.uniform(0.5, 1.0, 3)) * 0.01**2 for _ in range(4)]
    lag_cov = np.diag([1.0, 0.5, 0.8]) * 0.01**2
    t = window_time(window, 0.6)
    mean_quat = eval_orientation(window, t)
    propagated = quat_cov_to_rotvec_cov(mean_quat, orientation_covariance(window, covs, lag_cov, t))
    draws = 20_000
    errors = np.zeros((draws, 3))
    for n in range(draws):
        increments = window.increments + np.stack([rng.multivariate_normal(np.zeros(3), c) for c in covs])
        lag = quat_mul(window.lag_quat, quat_exp(rng.multivariate_normal(np.zeros(3), lag_cov)))
        q = eval_orientation(SplineWindow(window.knot_times, window.control_points, increments, lag), t)
        errors[n] = quat_log(quat_mul(quat_conj(mean_quat), q))
    assert frobenius_error(np.cov(errors, rowvar=False), propagated) < 0.05


@pytest.mark.slow
def test_measurement_covariance_monte_carlo(rng):
    s = SphericalCoord(20.0, 0.3, 0.1)
    sr, sa, se = 0.1, np.deg2rad(0.5), np.deg2rad(0.5)
    draws = 100_000
    cloud = spherical_to_cartesian_array(
        s.range_m + rng.normal(scale=sr, size=draws),
        s.azimuth_rad + rng.normal(scale=sa, size=draws),
        s.elevation_rad + rng.normal(scale=se, size=draws),
    )
    assert frobenius_error(np.cov(cloud, rowvar=False), measurement_covariance(s, sr, sa, se)) < 0.05


@pytest.mark.slow
def test_world_point_covariance_monte_carlo(rng):
    rotation = quat_to_rotmat(quat_exp(rng.normal(size=3)))
    extrinsics = Extrinsics(quat_to_rotmat(quat_exp(rng.normal(scale=0.2, size=3))), np.array([0.3, -0.1, 0.2]))
    point_radar = np.array([12.0, -4.0, 1.5])
    point_imu = extrinsics.rotation @ point_radar + extrinsics.translation
    pose = PoseCovariance(random_spd(rng, 3, 1e-3), random_spd(rng, 3, 1e-5))
    meas = measurement_covariance(SphericalCoord(12.7, -0.32, 0.12), 0.05, np.deg2rad(0.5), np.deg2rad(0.5))

    draws = 100_000
    d_trans = rng.multivariate_normal(np.zeros(3), pose.translation, size=draws)
    d_rot = Rotation.from_rotvec(rng.multivariate_normal(np.zeros(3), pose.rotation, size=draws))
    d_meas = rng.multivariate_normal(np.zeros(3), meas, size=draws)
    local = d_rot.apply(point_imu + d_meas @ extrinsics.rotation.T)
    cloud = d_trans + local @ rotation.T

    expected = world_point_covariance(pose, rotation, extrinsics, point_imu, meas).covariance
    assert frobenius_error(np.cov(cloud, rowvar=False), expected) < 0.05


@pytest.mark.slow
def test_rotvec_conversion_monte_carlo(rng):
    q = quat_exp(rng.normal(size=3))
    sigma = random_spd(rng, 3, 1e-4)
    draws = 100_000
    tangent = rng.multivariate_normal(np.zeros(3), sigma, size=draws)
    # scipy orders quaternions scalar-last
    local = np.roll(Rotation.from_rotvec(tangent).as_quat(), 1, axis=1)
    samples = local @ quat_left_matrix(q).T
    converted = quat_cov_to_rotvec_cov(q, np.cov(samples, rowvar=False))
    assert frobenius_error(converted, sigma) < 0.05
