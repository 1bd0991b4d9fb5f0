# app/services/simulation_service.py
"""
Synthetic radar-inertial sequences.

The ground truth is itself a cubic B-spline (GlobalSpline), so a noiseless
sequence is reproduced exactly by the measurement models. Radar returns come
from ray casting against finite rectangles plus isolated point scatterers;
Doppler follows the static-world forward model; the IMU reads the spline
derivatives plus gravity, bias random walk and white noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.errors import ScenarioError
from app.core.geometry import (
    cartesian_to_spherical_array,
    quat_exp,
    quat_to_rotmat,
    spherical_to_cartesian_array,
)
from app.core.spline import GlobalSpline
from app.models.domain import Extrinsics, ImuData, RadarScan, TrajectoryEstimate
from app.models.schemas import ScenarioSpec

logger = logging.getLogger(__name__)

FLOOR_Z = -1.5
RAY_OVERSAMPLE = 4
RAY_ATTEMPTS = 6


@dataclass(frozen=True)
class Scene:
    """Finite rectangles (center, normal, two half-axes) and point scatterers, each with an RCS."""

    centers: np.ndarray
    normals: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: np.ndarray
    half_v: np.ndarray
    plane_rcs: np.ndarray
    scatterers: np.ndarray
    scatterer_rcs: np.ndarray


@dataclass
class SyntheticScenario:
    spec: ScenarioSpec
    ground_truth: GlobalSpline
    scene: Scene
    scans: list[RadarScan]
    imu: ImuData
    extrinsics: Extrinsics
    gravity: np.ndarray

    def ground_truth_trajectory(self) -> TrajectoryEstimate:
        samples = self.ground_truth.sample(self.imu.times)
        return TrajectoryEstimate(samples.times, samples.position, samples.quat)


class _SceneBuilder:
    def __init__(self) -> None:
        self.rects: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float, float, float]] = []

    def rect(self, center, normal, axis_u, half_u: float, half_v: float, rcs: float) -> None:
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        u = np.asarray(axis_u, dtype=float)
        u = u / np.linalg.norm(u)
        v = np.cross(n, u)
        self.rects.append((np.asarray(center, dtype=float), n, u, v, half_u, half_v, rcs))

    def build(self, scatterers: np.ndarray, scatterer_rcs: np.ndarray) -> Scene:
        cols = list(zip(*self.rects))
        return Scene(
            centers=np.array(cols[0]),
            normals=np.array(cols[1]),
            axis_u=np.array(cols[2]),
            axis_v=np.array(cols[3]),
            half_u=np.array(cols[4]),
            half_v=np.array(cols[5]),
            plane_rcs=np.array(cols[6]),
            scatterers=scatterers.reshape(-1, 3),
            scatterer_rcs=scatterer_rcs.reshape(-1),
        )


def box_scene(rng: np.random.Generator, scatterer_count: int = 80) -> Scene:
    """Floor, four walls at x = +-35 / y = +-25 and free-standing panels."""
    b = _SceneBuilder()
    b.rect([0, 0, FLOOR_Z], [0, 0, 1], [1, 0, 0], 40.0, 30.0, 2.0)
    b.rect([35, 0, 2.5], [-1, 0, 0], [0, 1, 0], 25.0, 4.0, 8.0)
    b.rect([-35, 0, 2.5], [1, 0, 0], [0, 1, 0], 25.0, 4.0, 8.0)
    b.rect([0, 25, 2.5], [0, -1, 0], [1, 0, 0], 35.0, 4.0, 6.0)
    b.rect([0, -25, 2.5], [0, 1, 0], [1, 0, 0], 35.0, 4.0, 6.0)
    for center, normal, axis in (
        ([20, 12, 0.5], [-1, -0.3, 0], [0.3, -1, 0]),
        ([-22, -10, 0.5], [1, 0.4, 0], [-0.4, 1, 0]),
        ([5, -18, 0.5], [0.2, 1, 0], [1, -0.2, 0]),
        ([-8, 17, 0.5], [-0.3, -1, 0], [1, -0.3, 0]),
    ):
        b.rect(center, normal, axis, 3.0, 2.0, 12.0)
    xy = rng.uniform([-33.0, -23.0], [33.0, 23.0], size=(scatterer_count, 2))
    z = rng.uniform(-1.0, 2.5, size=(scatterer_count, 1))
    rcs = rng.uniform(10.0, 20.0, size=scatterer_count)
    return b.build(np.hstack([xy, z]), rcs)


def tunnel_scene(rng: np.random.Generator, length: float, scatterer_count: int = 80) -> Scene:
    """Walls at y = +-4, floor and ceiling; evenly spaced ribs give a repetitive structure."""
    b = _SceneBuilder()
    half = length / 2.0
    cx = half - 20.0
    b.rect([cx, 0, FLOOR_Z], [0, 0, 1], [1, 0, 0], half, 4.0, 2.0)
    b.rect([cx, 0, 3.0], [0, 0, -1], [1, 0, 0], half, 4.0, 4.0)
    b.rect([cx, 4.0, 0.75], [0, -1, 0], [1, 0, 0], half, 2.25, 6.0)
    b.rect([cx, -4.0, 0.75], [0, 1, 0], [1, 0, 0], half, 2.25, 6.0)
    ribs_x = np.arange(-20.0, length - 20.0, 5.0)
    ribs = []
    for x in ribs_x:
        for y in (-3.9, 3.9):
            for z in (-0.5, 1.0, 2.5):
                ribs.append([x, y, z])
    ribs = np.array(ribs)
    extra = max(scatterer_count - ribs.shape[0], 0)
    if extra:
        loose = np.column_stack(
            [rng.uniform(-20.0, length - 20.0, extra), rng.choice([-3.95, 3.95], extra), rng.uniform(-1.0, 2.8, extra)]
        )
        ribs = np.vstack([ribs, loose])
    rcs = np.full(ribs.shape[0], 15.0) + rng.normal(0.0, 1.0, ribs.shape[0])
    return b.build(ribs, rcs)


def _progress(tau: np.ndarray, rest: float, ramp: float) -> np.ndarray:
    """Progress along the path: zero at rest, smoothstep ramp to unit speed, then linear."""
    x = np.clip((tau - rest) / ramp, 0.0, 1.0)
    ramped = ramp * (x**3 - x**4 / 2.0)
    return np.where(tau <= rest + ramp, ramped, ramp / 2.0 + (tau - rest - ramp))


def _figure_eight(s: np.ndarray, spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    w = 2.0 * np.pi / spec.period
    A, B = spec.amplitude_x, spec.amplitude_y
    heading0 = np.arctan2(2.0 * B, A)
    c, sn = np.cos(-heading0), np.sin(-heading0)
    raw = np.stack([A * np.sin(w * s), B * np.sin(2.0 * w * s)], axis=-1)
    draw = np.stack([A * w * np.cos(w * s), 2.0 * B * w * np.cos(2.0 * w * s)], axis=-1)
    rot = np.array([[c, -sn], [sn, c]])
    xy = raw @ rot.T
    dxy = draw @ rot.T
    yaw = np.unwrap(np.arctan2(dxy[:, 1], dxy[:, 0]))
    return xy, yaw


def ground_truth_spline(spec: ScenarioSpec, start: float = 0.0) -> GlobalSpline:
    dt = spec.knot_interval
    count = int(np.ceil(spec.duration / dt)) + 6
    origin = start - 3.0 * dt
    # control value n sits at knot n + 1, the centre of its basis support
    centres = origin + (np.arange(count) + 1) * dt
    tau = centres - start
    positions = np.zeros((count, 3))
    yaw = np.zeros(count)
    if spec.scenario == "figure_eight":
        s = _progress(tau, spec.rest_duration, spec.ramp_duration)
        xy, yaw = _figure_eight(s, spec)
        positions[:, :2] = xy
    elif spec.scenario == "tunnel":
        s = _progress(tau, spec.rest_duration, spec.ramp_duration)
        positions[:, 0] = spec.tunnel_speed * s
    quats = quat_exp(np.column_stack([np.zeros(count), np.zeros(count), yaw]))
    return GlobalSpline(origin, dt, positions, quats)


def _ray_cast(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """(distance, rectangle index) of the nearest hit per ray; inf / -1 on a miss."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        denom = dirs @ scene.normals.T
        offset = np.einsum("mpj,pj->mp", scene.centers[None, :, :] - origins[:, None, :], scene.normals)
        dist = offset / denom
        hits = origins[:, None, :] + dist[..., None] * dirs[:, None, :]
        local = hits - scene.centers[None, :, :]
        inside = (np.abs(np.einsum("mpj,pj->mp", local, scene.axis_u)) <= scene.half_u[None, :]) & (
            np.abs(np.einsum("mpj,pj->mp", local, scene.axis_v)) <= scene.half_v[None, :]
        )
        valid = (np.abs(denom) > 1e-9) & (dist > 1e-6) & (dist <= max_range) & inside
    dist = np.where(valid, dist, np.inf)
    idx = np.argmin(dist, axis=1)
    best = dist[np.arange(dirs.shape[0]), idx]
    return best, np.where(np.isfinite(best), idx, -1)


class SimulationService:
    def __init__(self, spec: ScenarioSpec, extrinsics: Extrinsics | None = None) -> None:
        self.spec = spec
        self.extrinsics = extrinsics or Extrinsics()
        self.rng = np.random.default_rng(spec.seed)

    def generate(self) -> SyntheticScenario:
        spec = self.spec
        truth = ground_truth_spline(spec)
        if spec.scenario == "tunnel":
            length = spec.tunnel_speed * spec.duration + 60.0
            scene = tunnel_scene(self.rng, length, spec.scatterer_count)
        else:
            scene = box_scene(self.rng, spec.scatterer_count)
        gravity = np.array([0.0, 0.0, spec.gravity_magnitude])
        imu = self._imu(truth, gravity)
        frame_times = np.arange(0.0, spec.duration, 1.0 / spec.radar_rate)
        frame_times = frame_times[frame_times + spec.scan_spread < truth.end]
        scans = [self._scan(truth, scene, float(t), k) for k, t in enumerate(frame_times)]
        logger.info(
            "Generated %s scenario: %d frames, %d radar points, %d IMU samples",
            spec.scenario,
            len(scans),
            sum(len(s) for s in scans),
            len(imu),
        )
        return SyntheticScenario(spec, truth, scene, scans, imu, self.extrinsics, gravity)

    def _imu(self, truth: GlobalSpline, gravity: np.ndarray) -> ImuData:
        spec = self.spec
        dt = 1.0 / spec.imu_rate
        times = np.arange(0.0, spec.duration, dt)
        times = times[times < truth.end]
        samples = truth.sample(times)
        rot = quat_to_rotmat(samples.quat)
        n = times.shape[0]
        gyro_walk = np.cumsum(self.rng.normal(0.0, spec.gyro_bias_walk * np.sqrt(dt), (n, 3)), axis=0)
        accel_walk = np.cumsum(self.rng.normal(0.0, spec.accel_bias_walk * np.sqrt(dt), (n, 3)), axis=0)
        specific = np.einsum("nji,nj->ni", rot, samples.acceleration + gravity)
        gyro = samples.angular_velocity + np.asarray(spec.gyro_bias) + gyro_walk + self.rng.normal(0.0, spec.gyro_noise, (n, 3))
        accel = specific + np.asarray(spec.accel_bias) + accel_walk + self.rng.normal(0.0, spec.accel_noise, (n, 3))
        return ImuData(times, gyro, accel)

    def _radar_poses(self, truth: GlobalSpline, times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per time: radar origin in world, world-from-radar rotation, radar velocity in the radar frame."""
        s = truth.sample(times)
        R = quat_to_rotmat(s.quat).reshape(-1, 3, 3)
        ext = self.extrinsics
        origins = s.position + R @ ext.translation
        v_imu = np.einsum("nji,nj->ni", R, s.velocity) + np.cross(s.angular_velocity, ext.translation)
        return origins, R @ ext.rotation, v_imu @ ext.rotation

    def _scan(self, truth: GlobalSpline, scene: Scene, stamp: float, scan_id: int) -> RadarScan:
        spec = self.spec
        rng = self.rng
        n_total = spec.points_per_frame
        n_dynamic = int(round(spec.dynamic_fraction * n_total))
        n_ghost = int(round(spec.ghost_fraction * n_total))
        n_static = n_total - n_dynamic - n_ghost
        max_az = np.deg2rad(spec.fov_azimuth_deg)
        max_el = np.deg2rad(spec.fov_elevation_deg)

        def draw_times(count: int) -> np.ndarray:
            if spec.scan_spread <= 0.0:
                return np.full(count, stamp)
            return stamp + rng.uniform(0.0, spec.scan_spread, count)

        def in_fov(r, a, e) -> np.ndarray:
            return (np.abs(a) <= max_az) & (np.abs(e) <= max_el) & (r <= spec.max_range) & (r >= spec.min_range)

        # isolated scatterers visible from the frame start pose
        origin0, R0, _ = self._radar_poses(truth, np.array([stamp]))
        rel0 = (scene.scatterers - origin0[0]) @ R0[0]
        visible = np.flatnonzero(in_fov(*cartesian_to_spherical_array(rel0)))
        n_scatter = min(int(round(spec.scatterer_fraction * n_static)), visible.shape[0])
        chosen = rng.choice(visible, size=n_scatter, replace=False) if n_scatter else np.zeros(0, dtype=int)
        t_sc = draw_times(n_scatter)
        origins, R_wr, _ = self._radar_poses(truth, t_sc)
        sc_pts = np.einsum("nji,nj->ni", R_wr, scene.scatterers[chosen] - origins)

        times, points, rcs = [t_sc], [sc_pts], [scene.scatterer_rcs[chosen]]
        need = n_static - n_scatter
        for _ in range(RAY_ATTEMPTS):
            if need <= 0:
                break
            m = need * RAY_OVERSAMPLE
            t_ray = draw_times(m)
            origins, R_wr, _ = self._radar_poses(truth, t_ray)
            dirs_r = spherical_to_cartesian_array(np.ones(m), rng.uniform(-max_az, max_az, m), rng.uniform(-max_el, max_el, m))
            dist, plane = _ray_cast(scene, origins, np.einsum("nij,nj->ni", R_wr, dirs_r), spec.max_range)
            ok = np.flatnonzero((plane >= 0) & (dist >= spec.min_range))[:need]
            times.append(t_ray[ok])
            points.append(dirs_r[ok] * dist[ok, None])
            rcs.append(scene.plane_rcs[plane[ok]])
            need -= ok.shape[0]
        t_static = np.concatenate(times)
        if t_static.shape[0] == 0:
            raise ScenarioError(f"frame {scan_id} at t={stamp:.3f} has no landmark in the field of view")

        static_pts = np.vstack(points)
        r, a, e = cartesian_to_spherical_array(static_pts)
        _, _, v_radar = self._radar_poses(truth, t_static)
        doppler = spec.doppler_sign * np.einsum("nj,nj->n", static_pts / r[:, None], v_radar)
        t_all, rcs_all = t_static, np.concatenate(rcs)

        k = n_dynamic + n_ghost
        if k:
            t_extra = draw_times(k)
            ra = rng.uniform(max(spec.min_range, 3.0), min(spec.max_range, 40.0), k)
            aa = rng.uniform(-max_az, max_az, k)
            ea = rng.uniform(-max_el, max_el, k)
            _, _, v_extra = self._radar_poses(truth, t_extra)
            extra_dirs = spherical_to_cartesian_array(np.ones(k), aa, ea)
            extra_dop = spec.doppler_sign * np.einsum("nj,nj->n", extra_dirs, v_extra)
            # movers carry a radial speed of their own; ghosts are static-consistent clutter
            extra_dop[:n_dynamic] += rng.uniform(3.0, 8.0, n_dynamic) * rng.choice([-1.0, 1.0], n_dynamic)
            t_all = np.concatenate([t_all, t_extra])
            r, a, e = np.concatenate([r, ra]), np.concatenate([a, aa]), np.concatenate([e, ea])
            doppler = np.concatenate([doppler, extra_dop])
            rcs_all = np.concatenate([rcs_all, rng.uniform(0.0, 10.0, k)])

        count = t_all.shape[0]
        order = np.argsort(t_all, kind="stable")
        r = np.maximum(r + rng.normal(0.0, spec.sigma_range, count), 1e-3)
        a = a + rng.normal(0.0, np.deg2rad(spec.sigma_azimuth_deg), count)
        e = e + rng.normal(0.0, np.deg2rad(spec.sigma_elevation_deg), count)
        doppler = doppler + rng.normal(0.0, spec.sigma_doppler, count)
        rcs_all = rcs_all + rng.normal(0.0, spec.sigma_rcs, count)
        return RadarScan(stamp, t_all[order], r[order], a[order], e[order], doppler[order], rcs_all[order], scan_id=scan_id)


def generate_scenario(spec: ScenarioSpec, extrinsics: Extrinsics | None = None) -> SyntheticScenario:
    return SimulationService(spec, extrinsics).generate()
