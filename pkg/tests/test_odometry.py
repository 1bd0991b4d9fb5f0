# tests/test_odometry.py
from __future__ import annotations

import numpy as np
import pytest

from app.adapters.streams import text_io
from app.core.config import PipelineConfig
from app.core.errors import ContractViolation, StreamGapError, StreamOrderError
from app.core.geometry import quat_exp, quat_log, quat_to_rotmat
from app.core.spline import pose_terms
from app.models.domain import ImuData, RadarScan, state_to_window
from app.models.schemas import ScenarioSpec
from app.services.evaluation_service import evaluate
from app.services.odometry_service import OdometryService, RadarStream, gravity_alignment, run_odometry
from app.services.simulation_service import generate_scenario
from tests.helpers import drop_interval, noiseless_config


@pytest.fixture(scope="module")
def stationary():
    spec = ScenarioSpec(scenario="stationary", duration=3.0, points_per_frame=60, scatterer_count=40)
    return generate_scenario(spec.noiseless())

def after(scenario, start: float) -> tuple[list[RadarScan], ImuData]:
    scans = [s for s in scenario.scans if s.stamp >= start]
    return scans, scenario.imu.between(start, np.inf)


@pytest.mark.parametrize(
    "accel",
    [(0.0, 0.0, 9.81), (0.0, 0.0, -9.81), (1.0, -2.0, 9.0), (9.81, 0.0, 0.0)],
    ids=["level", "upside-down", "tilted", "on-side"],
)
def test_gravity_alignment_maps_specific_force_onto_up(accel):
    a = np.asarray(accel)
    R = quat_to_rotmat(gravity_alignment(a))
    np.testing.assert_allclose(R @ (a / np.linalg.norm(a)), [0.0, 0.0, 1.0], atol=1e-12)


def test_radar_stream_rejects_unsorted_scans():
    first = RadarScan(0.1, [0.1], [5.0], [0.0], [0.0], [0.0], [1.0], scan_id=0)
    second = RadarScan(0.0, [0.0], [5.0], [0.0], [0.0], [0.0], [1.0], scan_id=1)
    with pytest.raises(StreamOrderError):
        RadarStream.from_scans([first, second])


def test_radar_stream_groups_returns_by_scan():
    scans = [
        RadarScan(0.0, [0.00, 0.02], [5.0, 6.0], [0.0, 0.1], [0.0, 0.0], [0.0, 0.0], [1.0, 2.0], scan_id=3),
        RadarScan(0.05, [0.05, 0.07], [7.0, 8.0], [0.2, 0.3], [0.0, 0.0], [0.0, 0.0], [3.0, 4.0], scan_id=4),
    ]
    stream = RadarStream.from_scans(scans)
    assert len(stream) == 4
    parts = stream.scans_between(0.01, 0.06)
    assert [p.scan_id for p in parts] == [3, 4]
    assert [p.stamp for p in parts] == [0.0, 0.05]
    np.testing.assert_array_equal(parts[0].ranges, [6.0])
    np.testing.assert_array_equal(parts[1].ranges, [7.0])


def test_initialization_needs_imu_at_rest():
    service = OdometryService(PipelineConfig())
    imu = ImuData(np.array([2.0]), np.zeros((1, 3)), np.array([[0.0, 0.0, 9.81]]))
    with pytest.raises(ContractViolation):
        service.initialize(imu, 0.0)


def test_initialization_uses_mean_gyro_as_bias():
    service = OdometryService(PipelineConfig())
    times = np.arange(50) * 0.01
    gyro = np.tile([0.01, -0.02, 0.005], (50, 1))
    accel = np.tile([0.0, 0.0, 9.81], (50, 1))
    state = service.initialize(ImuData(times, gyro, accel), 0.0)
    np.testing.assert_allclose(state.gyro_bias, [0.01, -0.02, 0.005])
    np.testing.assert_allclose(state.knot_times, [-0.2, -0.1, 0.0, 0.1], atol=1e-12)


def test_stationary_run_stays_put(stationary):
    result = run_odometry(PipelineConfig(), stationary.scans, stationary.imu)
    traj = result.trajectory

    assert result.knots == len(result.diagnostics) >= 29
    assert np.all(np.diff(traj.times) > 0.0)
    assert np.max(np.linalg.norm(traj.positions, axis=1)) < 0.05
    assert np.max(np.linalg.norm(quat_log(traj.quats), axis=1)) < 0.01
    assert len(result.map_arrays) > 0
    statuses = {r["status"] for r in result.diagnostics}
    assert "gap" not in statuses
    assert all(r["n_imu"] > 0 for r in result.diagnostics)
    assert any(r["n_pl"] + r["n_pt"] > 0 for r in result.diagnostics)


def test_noiseless_stationary_run_is_exact(stationary):
    result = run_odometry(noiseless_config(), stationary.scans, stationary.imu)
    traj = result.trajectory

    assert np.max(np.linalg.norm(traj.positions, axis=1)) < 1e-6
    assert np.max(np.linalg.norm(quat_log(traj.quats), axis=1)) < 1e-6
    assert evaluate(traj, stationary.ground_truth_trajectory()).ate < 1e-6
    assert sum(r["n_pl"] for r in result.diagnostics) > 0


def test_runs_are_deterministic(stationary):
    config = PipelineConfig(use_localizability=False)
    a = run_odometry(config, stationary.scans, stationary.imu).trajectory
    b = run_odometry(config, stationary.scans, stationary.imu).trajectory
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.quats, b.quats)


ABLATIONS = pytest.mark.parametrize(
    "overrides",
    [
        {"use_doppler": False},
        {"use_doppler": False, "use_localizability": False},
        {"uncertainty_mode": "none"},
        {"uncertainty_mode": "measurement"},
        {"use_plane_residual": False},
        {"use_gravity": False, "use_gyro": False},
        {"imu_stride": 5},
    ],
    ids=[
        "no-doppler",
        "no-doppler-unconstrained",
        "no-uncertainty",
        "measurement-only",
        "distribution-only",
        "radar-only",
        "imu-stride",
    ],
)


@ABLATIONS
def test_ablation_switches_stay_exact_on_noiseless_data(stationary, overrides):
    result = run_odometry(noiseless_config(**overrides), stationary.scans, stationary.imu)
    assert result.knots >= 29
    assert np.max(np.linalg.norm(result.trajectory.positions, axis=1)) < 1e-6
    assert np.max(np.linalg.norm(quat_log(result.trajectory.quats), axis=1)) < 1e-6
    if overrides.get("use_plane_residual") is False:
        assert all(r["n_pl"] == 0 for r in result.diagnostics)
        assert all(r["constrained_axes"] == [] for r in result.diagnostics)


@ABLATIONS
def test_ablation_switches_keep_drift_bounded(stationary, overrides):
    result = run_odometry(PipelineConfig(**overrides), stationary.scans, stationary.imu)
    assert result.knots >= 29
    assert np.all(np.isfinite(result.trajectory.positions))
    assert np.max(np.linalg.norm(result.trajectory.positions, axis=1)) < 1.0


def test_gap_raises_with_checkpoint_and_resume_continues(stationary, tmp_path):
    config = PipelineConfig()
    scans, imu = drop_interval(stationary, 1.05, 2.05)

    with pytest.raises(StreamGapError) as info:
        run_odometry(config, scans, imu)
    error = info.value
    assert error.exit_code == 4
    ckpt = error.checkpoint
    assert 1.0 < ckpt.meta["resume_time"] < 2.0
    # the checkpoint holds the last updated window, not one extrapolated through the gap
    assert ckpt.state.knot_times[2] < ckpt.meta["resume_time"]
    assert len(ckpt.trajectory) > 0
    assert len(ckpt.map_arrays) > 0

    restored = text_io.load_checkpoint(text_io.save_checkpoint(tmp_path / "checkpoint.npz", ckpt))
    rest_scans, rest_imu = after(stationary, 2.05)
    result = OdometryService(config).run(rest_scans, rest_imu, resume=restored)

    traj = result.trajectory
    assert np.all(np.diff(traj.times) > 0.0)
    assert traj.times[0] == pytest.approx(ckpt.trajectory.times[0])
    assert traj.times[-1] > 2.5
    assert np.max(np.linalg.norm(traj.positions, axis=1)) < 0.25
    assert result.diagnostics[0]["t_start"] == pytest.approx(2.0, abs=1e-6)


def test_noiseless_resume_holds_the_checkpoint_pose(stationary):
    config = noiseless_config()
    scans, imu = drop_interval(stationary, 1.05, 2.05)
    with pytest.raises(StreamGapError) as info:
        run_odometry(config, scans, imu)

    rest_scans, rest_imu = after(stationary, 2.05)
    result = OdometryService(config).run(rest_scans, rest_imu, resume=info.value.checkpoint)
    resumed = result.trajectory.times >= 2.0
    assert np.count_nonzero(resumed) >= 9
    assert np.max(np.linalg.norm(result.trajectory.positions[resumed], axis=1)) < 1e-6


def test_reanchor_holds_pose_and_grows_covariance():
    service = OdometryService(PipelineConfig())
    rest = ImuData(np.arange(60) * 0.01, np.zeros((60, 3)), np.tile([0.0, 0.0, 9.81], (60, 1)))
    state = service.filter.predict(service.initialize(rest, 0.0))
    state.x[0:12] = np.tile([1.0, 2.0, 0.5], 4) + np.repeat([0.0, 0.1, 0.2, 0.3], 3)
    state.x[12:24] = 0.01

    held = service._reanchor(state, np.array([1.23]))
    assert held.knot_times[2] <= 1.23 < held.knot_times[3]
    assert held.knot_index == state.knot_index + 11
    np.testing.assert_allclose(held.control_points, np.tile(held.control_points[0], (4, 1)))
    np.testing.assert_array_equal(held.increments, np.zeros((4, 3)))

    window = state_to_window(held)
    for u in (0.0, 0.5):
        terms = pose_terms(window, window.start + u * window.dt, jacobians=False)
        np.testing.assert_allclose(terms.velocity, 0.0, atol=1e-12)
        np.testing.assert_allclose(terms.angular_velocity, 0.0, atol=1e-12)

    start = pose_terms(state_to_window(state), state.knot_times[2], jacobians=False)
    np.testing.assert_allclose(held.control_points[0], start.position, atol=1e-12)
    np.testing.assert_allclose(held.lag_quat, start.quat, atol=1e-12)

    grown = service.uncertainty.pose_covariance(held, held.knot_times[2]).translation
    before = service.uncertainty.pose_covariance(state, state.knot_times[2]).translation
    assert np.trace(grown) > np.trace(before)
    assert np.linalg.eigvalsh(held.P).min() > 0.0


def test_short_gap_is_bridged(stationary):
    scans, imu = drop_interval(stationary, 1.05, 1.35)
    result = run_odometry(PipelineConfig(), scans, imu)
    gaps = [r for r in result.diagnostics if r["status"] == "gap"]
    assert 1 <= len(gaps) <= 3


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_figure_eight_accuracy(seed):
    scenario = generate_scenario(ScenarioSpec(scenario="figure_eight", duration=60.0, seed=seed))
    result = run_odometry(PipelineConfig(), scenario.scans, scenario.imu)
    metrics = evaluate(result.trajectory, scenario.ground_truth_trajectory())
    assert metrics.ate < 0.1
    assert metrics.rpe_t < 0.01
    assert result.knots_per_second > 10.0


@pytest.mark.slow
def test_noiseless_figure_eight_is_tracked_exactly():
    scenario = generate_scenario(ScenarioSpec(scenario="figure_eight", duration=60.0, seed=0).noiseless())
    config = noiseless_config(uncertainty_mode="measurement", process_sigma_translation=0.05, process_sigma_rotation=0.01)
    result = run_odometry(config, scenario.scans, scenario.imu)
    assert evaluate(result.trajectory, scenario.ground_truth_trajectory()).ate < 1e-3


@pytest.mark.slow
def test_full_uncertainty_beats_ablations_with_outliers():
    spec = ScenarioSpec(scenario="figure_eight", duration=30.0, seed=3, ghost_fraction=0.1)
    scenario = generate_scenario(spec)
    gt = scenario.ground_truth_trajectory()
    ate = {
        mode: evaluate(run_odometry(PipelineConfig(uncertainty_mode=mode), scenario.scans, scenario.imu).trajectory, gt).ate
        for mode in ("full", "measurement", "none")
    }
    assert ate["full"] <= ate["measurement"]
    assert ate["full"] <= ate["none"]


@pytest.mark.slow
def test_tunnel_constraint_beats_free_update():
    scenario = generate_scenario(ScenarioSpec(scenario="tunnel", duration=20.0, seed=7))
    gt = scenario.ground_truth_trajectory()

    constrained = run_odometry(PipelineConfig(), scenario.scans, scenario.imu)
    assert any(r.get("constrained_axes") for r in constrained.diagnostics)

    free = run_odometry(PipelineConfig(use_localizability=False), scenario.scans, scenario.imu)
    ate_constrained = evaluate(constrained.trajectory, gt).ate
    ate_free = evaluate(free.trajectory, gt).ate
    assert ate_constrained < 1.0
    assert ate_constrained < ate_free


def test_extrinsics_are_built_from_config():
    config = PipelineConfig(extrinsic_rotvec=(0.0, 0.0, 0.5), extrinsic_translation=(0.1, 0.2, 0.3))
    service = OdometryService(config)
    np.testing.assert_allclose(service.extrinsics.rotation, quat_to_rotmat(quat_exp(np.array([0.0, 0.0, 0.5]))))
    np.testing.assert_allclose(service.extrinsics.translation, [0.1, 0.2, 0.3])
