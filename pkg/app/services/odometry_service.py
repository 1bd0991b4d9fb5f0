# app/services/odometry_service.py
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from app.adapters.streams.text_io import Checkpoint
from app.core.config import PipelineConfig
from app.core.errors import ContractViolation, StreamGapError, StreamOrderError
from app.core.geometry import IDENTITY_QUAT, quat_exp, quat_to_rotmat
from app.core.spline import PoseTerms, SplineWindow, pose_terms
from app.models.domain import (
    ROTATION,
    TRANSLATION,
    EgoVelocity,
    Extrinsics,
    FilterState,
    ImuData,
    MapPoint,
    RadarScan,
    ResidualBlock,
    TrajectoryEstimate,
    state_to_window,
)
from app.repositories.map_repo import MapArrays, MapRepository, MapSnapshot
from app.services.filter_service import FilterService, build_process_model, initial_state
from app.services.localizability_service import LocalizabilityService
from app.services.preprocess_service import PreprocessService
from app.services.residual_service import (
    DistributionCorrespondence,
    PlaneCorrespondence,
    distribution_residual,
    doppler_residual,
    env_weights,
    fit_plane,
    gravity_residual,
    gyro_residual,
    plane_residual,
    rcs_distribution,
    within_gate,
)
from app.services.uncertainty_service import UncertaintyService

logger = logging.getLogger(__name__)
diagnostics_logger = logging.getLogger("app.diagnostics")


@dataclass
class OdometryResult:
    trajectory: TrajectoryEstimate
    map_arrays: MapArrays
    diagnostics: list[dict]
    knots: int
    runtime_s: float
    state: FilterState

    @property
    def knots_per_second(self) -> float:
        return self.knots / self.runtime_s if self.runtime_s > 0 else float("inf")


@dataclass
class RadarStream:
    """All returns of a sequence in time order, with the scan each came from."""

    times: np.ndarray
    ranges: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    dopplers: np.ndarray
    rcs: np.ndarray
    scan_ids: np.ndarray
    stamps: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_scans(cls, scans: Sequence[RadarScan]) -> "RadarStream":
        if not scans:
            empty = np.zeros(0)
            return cls(empty, empty, empty, empty, empty, empty, np.zeros(0, dtype=int))
        stream = cls(
            np.concatenate([s.times for s in scans]),
            np.concatenate([s.ranges for s in scans]),
            np.concatenate([s.azimuths for s in scans]),
            np.concatenate([s.elevations for s in scans]),
            np.concatenate([s.dopplers for s in scans]),
            np.concatenate([s.rcs for s in scans]),
            np.concatenate([np.full(len(s), s.scan_id, dtype=int) for s in scans]),
            {s.scan_id: float(s.stamp) for s in scans},
        )
        if np.any(np.diff(stream.times) < 0.0):
            raise StreamOrderError("radar point times are not sorted")
        return stream

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def scans_between(self, start: float, end: float) -> list[RadarScan]:
        lo, hi = np.searchsorted(self.times, [start, end], side="left")
        out = []
        ids = self.scan_ids[lo:hi]
        for scan_id in dict.fromkeys(ids.tolist()):
            sel = np.flatnonzero(ids == scan_id) + lo
            out.append(
                RadarScan(
                    self.stamps.get(scan_id, float(self.times[sel[0]])),
                    self.times[sel],
                    self.ranges[sel],
                    self.azimuths[sel],
                    self.elevations[sel],
                    self.dopplers[sel],
                    self.rcs[sel],
                    scan_id=int(scan_id),
                )
            )
        return out


@dataclass
class SegmentPoints:
    """Preprocessed returns of one knot interval, in radar frame."""

    times: np.ndarray
    points: np.ndarray
    ranges: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    dopplers: np.ndarray
    rcs: np.ndarray

    @classmethod
    def from_scans(cls, scans: Sequence[RadarScan]) -> "SegmentPoints":
        if not scans:
            e = np.zeros(0)
            return cls(e, np.zeros((0, 3)), e, e, e, e, e)

        def cat(name: str) -> np.ndarray:
            return np.concatenate([getattr(s, name) for s in scans])

        return cls(
            cat("times"),
            np.vstack([s.cartesian().reshape(-1, 3) for s in scans]),
            cat("ranges"),
            cat("azimuths"),
            cat("elevations"),
            cat("dopplers"),
            cat("rcs"),
        )

    def __len__(self) -> int:
        return int(self.times.shape[0])


def gravity_alignment(mean_accel: np.ndarray) -> np.ndarray:
    """Smallest rotation taking the at-rest specific force onto world +z."""
    norm = np.linalg.norm(mean_accel)
    if norm <= 0.0:
        return IDENTITY_QUAT.copy()
    a = mean_accel / norm
    up = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, up)
    s = np.linalg.norm(axis)
    angle = np.arctan2(s, float(a @ up))
    if s < 1e-12:
        return IDENTITY_QUAT.copy() if angle < 1.0 else quat_exp(np.array([np.pi, 0.0, 0.0]))
    return quat_exp(axis / s * angle)


class PoseCache:
    """PoseTerms of one window, computed once per distinct timestamp."""

    def __init__(self, window: SplineWindow) -> None:
        self.window = window
        self._terms: dict[float, PoseTerms] = {}

    def __call__(self, t: float) -> PoseTerms:
        t = float(t)
        terms = self._terms.get(t)
        if terms is None:
            terms = pose_terms(self.window, t)
            self._terms[t] = terms
        return terms

    def many(self, times: np.ndarray) -> list[PoseTerms]:
        return [self(t) for t in times]


def world_points(terms: Sequence[PoseTerms], points_radar: np.ndarray, extrinsics: Extrinsics) -> np.ndarray:
    if not terms:
        return np.zeros((0, 3))
    positions = np.stack([pt.position for pt in terms])
    rotations = np.stack([pt.rotation for pt in terms])
    points_imu = points_radar @ extrinsics.rotation.T + extrinsics.translation
    return positions + np.einsum("nij,nj->ni", rotations, points_imu)


class OdometryService:
    """High level coordinator for the knot loop: preprocess, associate, update, map."""

    def __init__(self, config: PipelineConfig) -> None:
        self.config = config
        c = config
        self.extrinsics = Extrinsics(
            quat_to_rotmat(quat_exp(np.asarray(c.extrinsic_rotvec, dtype=float))),
            np.asarray(c.extrinsic_translation, dtype=float),
        )
        self.filter = FilterService(
            build_process_model(
                c.process_sigma_translation,
                c.process_sigma_rotation,
                c.process_sigma_accel_bias,
                c.process_sigma_gyro_bias,
            ),
            epsilon=c.iekf_epsilon,
            max_iters=c.iekf_max_iters,
            divergence_trace=c.divergence_trace,
        )
        self.localizability = LocalizabilityService(c.loc_eta, c.loc_min_points, c.use_localizability and c.use_plane_residual)
        self.uncertainty = UncertaintyService(
            c.sigma_range,
            np.deg2rad(c.sigma_azimuth_deg),
            np.deg2rad(c.sigma_elevation_deg),
            mode=c.uncertainty_mode,
            fallback_sigma=c.fallback_point_sigma,
        )
        self.preprocess = PreprocessService(
            min_range=c.min_range,
            sign=float(c.doppler_sign),
            iterations=c.ransac_iterations,
            threshold=c.ransac_threshold,
            min_inliers=c.ransac_min_inliers,
            seed=c.ransac_seed,
            gate=c.dynamic_gate,
            jump=c.ego_jump,
        )
        self.map = MapRepository(c.tau_u, c.r_replace, c.map_window, c.rebuild_deleted_fraction, c.rebuild_pending_fraction)
        self.gravity = np.array([0.0, 0.0, c.gravity_magnitude])

    # ---- initialization ----
    def initialize(self, imu: ImuData, t0: float) -> FilterState:
        c = self.config
        rest = imu.between(t0, t0 + c.init_duration)
        if len(rest) == 0:
            raise ContractViolation(f"no IMU samples in the first {c.init_duration:.2f} s for initialization")
        mean_accel = rest.accel.mean(axis=0)
        gyro_bias = rest.gyro.mean(axis=0)
        orientation = gravity_alignment(mean_accel)
        logger.info(
            "Initialized from %d IMU samples: |a|=%.4f, gyro bias %s",
            len(rest),
            float(np.linalg.norm(mean_accel)),
            np.array2string(gyro_bias, precision=5),
        )
        return initial_state(
            t0,
            c.knot_interval,
            orientation,
            gyro_bias,
            sigma_translation=c.init_sigma_translation,
            sigma_rotation=c.init_sigma_rotation,
            sigma_accel_bias=c.init_sigma_accel_bias,
            sigma_gyro_bias=c.init_sigma_gyro_bias,
        )

    # ---- association ----
    def associate(
        self,
        snapshot: MapSnapshot,
        world: np.ndarray,
        point_covs: np.ndarray,
    ) -> tuple[list[PlaneCorrespondence], list[DistributionCorrespondence]]:
        """Plane route when the neighbourhood fit is reliable, distribution route otherwise.

        Both routes are gated at the prior: the residual of the query point
        must lie within ``association_gate`` standard deviations of its
        predicted spread, which carries the prior pose covariance in full mode.
        """
        c = self.config
        planes: list[PlaneCorrespondence] = []
        dists: list[DistributionCorrespondence] = []
        if len(snapshot) < c.plane_neighbors or world.shape[0] == 0:
            return planes, dists
        ids, distances = snapshot.knn_ids(world, c.plane_neighbors)
        arrays = snapshot.arrays
        for i in range(world.shape[0]):
            if ids[i, -1] < 0 or distances[i, -1] > c.max_correspondence_distance:
                continue
            nb = ids[i]
            if c.use_plane_residual:
                plane = fit_plane(
                    arrays.positions[nb],
                    arrays.covariances[nb],
                    c.tau_u,
                    c.tau_pl,
                    c.plane_rms_bound,
                    gate=c.association_gate,
                )
                if plane.reliable:
                    n = plane.normal
                    offset = float(n @ (world[i] - plane.point))
                    if within_gate(offset, float(n @ (plane.covariance + point_covs[i]) @ n), c.association_gate):
                        planes.append(PlaneCorrespondence(i, plane))
                        continue
            dist = rcs_distribution(arrays.positions[nb], arrays.rcs[nb])
            diff = world[i] - dist.centroid
            length = float(np.linalg.norm(diff))
            if length < 1e-9:
                continue
            direction = diff / length
            weights = dist.member_rcs / dist.member_rcs.sum() if np.all(dist.member_rcs > 0.0) else np.full(len(nb), 1.0 / len(nb))
            spread = np.einsum("i,ijk->jk", weights**2, arrays.covariances[nb]) + point_covs[i]
            if within_gate(length, float(direction @ spread @ direction), c.association_gate):
                dists.append(DistributionCorrespondence(i, dist))
        return planes, dists

    # ---- one knot ----
    def _assembler(
        self,
        seg: SegmentPoints,
        imu: ImuData,
        planes: list[PlaneCorrespondence],
        dists: list[DistributionCorrespondence],
        point_covs: np.ndarray,
    ):
        c = self.config
        weights = env_weights(len(planes), len(dists))
        sign = float(c.doppler_sign)

        def assemble(state: FilterState) -> list[ResidualBlock]:
            cache = PoseCache(state_to_window(state))
            blocks: list[ResidualBlock] = []
            for corr in planes:
                i = corr.index
                blocks.append(
                    plane_residual(
                        None,
                        seg.times[i],
                        seg.points[i],
                        corr.plane,
                        self.extrinsics,
                        weight=weights.plane,
                        point_cov=point_covs[i],
                        terms=cache(seg.times[i]),
                    )
                )
            for corr in dists:
                i = corr.index
                block = distribution_residual(
                    None,
                    seg.times[i],
                    seg.points[i],
                    corr.dist,
                    self.extrinsics,
                    point_rcs=float(seg.rcs[i]),
                    point_cov=point_covs[i],
                    weight=weights.point,
                    rcs_floor=c.rcs_floor,
                    rcs_cap=c.rcs_weight_max,
                    terms=cache(seg.times[i]),
                )
                if block is not None:
                    blocks.append(block)
            if c.use_doppler:
                for i in range(len(seg)):
                    blocks.append(
                        doppler_residual(
                            None,
                            seg.times[i],
                            seg.points[i],
                            float(seg.dopplers[i]),
                            self.extrinsics,
                            sigma=c.sigma_doppler,
                            sign=sign,
                            terms=cache(seg.times[i]),
                        )
                    )
            for k in range(len(imu)):
                t = imu.times[k]
                if c.use_gyro:
                    blocks.append(gyro_residual(None, t, imu.gyro[k], state.gyro_bias, sigma=c.sigma_gyro, terms=cache(t)))
                if c.use_gravity:
                    block = gravity_residual(
                        None,
                        t,
                        imu.accel[k],
                        state.accel_bias,
                        self.gravity,
                        sigma=c.sigma_gravity,
                        min_norm=c.gravity_min_norm,
                        terms=cache(t),
                    )
                    if block is not None:
                        blocks.append(block)
            return blocks

        return assemble

    def _map_candidates(self, state: FilterState, seg: SegmentPoints) -> list[MapPoint]:
        if len(seg) == 0:
            return []
        terms = PoseCache(state_to_window(state)).many(seg.times)
        positions = world_points(terms, seg.points, self.extrinsics)
        covs = self.uncertainty.scan_covariances(state, terms, seg.points, seg.ranges, seg.azimuths, seg.elevations, self.extrinsics)
        return [MapPoint(positions[i], covs[i], float(seg.rcs[i]), float(seg.times[i])) for i in range(len(seg))]

    def process_knot(self, prior: FilterState, scans: Sequence[RadarScan], imu: ImuData) -> tuple[FilterState, dict]:
        """Update the window with the measurements of [t_{i-1}, t_i) and grow the map."""
        c = self.config
        filtered: list[RadarScan] = []
        ego: Optional[EgoVelocity] = None
        for scan in scans:
            kept, ego = self.preprocess.process(scan)
            filtered.append(kept)
        seg = SegmentPoints.from_scans(filtered)
        imu = ImuData(imu.times[:: c.imu_stride], imu.gyro[:: c.imu_stride], imu.accel[:: c.imu_stride])

        # association, point covariances and localizability are fixed at the prior
        prior_terms = PoseCache(state_to_window(prior)).many(seg.times)
        world = world_points(prior_terms, seg.points, self.extrinsics)
        point_covs = self.uncertainty.scan_covariances(
            prior, prior_terms, seg.points, seg.ranges, seg.azimuths, seg.elevations, self.extrinsics
        )
        planes, dists = self.associate(self.map.snapshot(), world, point_covs)
        if planes:
            idx = np.array([p.index for p in planes])
            origins = np.stack([prior_terms[i].position + prior_terms[i].rotation @ self.extrinsics.translation for i in idx])
            constraints = self.localizability.analyze(world[idx] - origins, np.stack([p.plane.normal for p in planes]))
        else:
            constraints = self.localizability.analyze(np.zeros((0, 3)), np.zeros((0, 3)))

        assemble = self._assembler(seg, imu, planes, dists, point_covs)
        posterior, report = self.filter.update(prior, assemble, constraints)

        insert = self.map.insert_with_replacement(self._map_candidates(posterior, seg))
        window = state_to_window(posterior)
        center = pose_terms(window, window.start, jacobians=False).position
        pruned = self.map.prune(center)

        record = {
            "knot": int(posterior.knot_index),
            "t_start": float(posterior.knot_times[2]),
            "t_end": float(posterior.knot_times[3]),
            "iterations": report.iterations,
            "converged": report.converged,
            "status": report.status,
            "objective": report.objective,
            "objective_increases": report.objective_increases,
            "residuals": report.residual_count,
            "n_pl": len(planes),
            "n_pt": len(dists),
            "n_radar": len(seg),
            "n_imu": len(imu),
            "constrained_axes": list(constraints.axes),
            "ego_valid": bool(ego.valid) if ego is not None else None,
            "ego_reused": bool(ego.reused) if ego is not None else None,
            "map": {**insert.as_dict(), "pruned": pruned, "size": len(self.map)},
        }
        return posterior, record

    # ---- full run ----
    def run(
        self,
        scans: Sequence[RadarScan],
        imu: ImuData,
        resume: Optional[Checkpoint] = None,
    ) -> OdometryResult:
        c = self.config
        started = time.perf_counter()
        radar = RadarStream.from_scans(scans)
        if len(imu) > 1 and len(scans) > 1:
            imu_rate = (len(imu) - 1) / (imu.times[-1] - imu.times[0])
            radar_rate = (len(scans) - 1) / max(scans[-1].stamp - scans[0].stamp, 1e-9)
            if imu_rate < radar_rate:
                logger.warning("IMU rate %.1f Hz is below radar rate %.1f Hz", imu_rate, radar_rate)

        times_all = np.concatenate([radar.times, imu.times])
        if times_all.size == 0:
            raise ContractViolation("no measurements to process")
        end_time = float(times_all.max())

        traj_times: list[float] = []
        traj_pos: list[np.ndarray] = []
        traj_quat: list[np.ndarray] = []
        if resume is not None:
            state = resume.state.copy()
            self.map.load(resume.map_arrays)
            self.gravity = np.asarray(resume.gravity, dtype=float)
            if resume.ego_velocity is not None:
                self.preprocess.previous = EgoVelocity(np.asarray(resume.ego_velocity, dtype=float), 0, True)
            traj_times = resume.trajectory.times.tolist()
            traj_pos = list(resume.trajectory.positions)
            traj_quat = list(resume.trajectory.quats)
            state = self._reanchor(state, times_all)
            logger.info("Resuming at knot %d (t=%.3f)", state.knot_index, state.knot_times[2])
        else:
            state = self.initialize(imu, float(times_all.min()))
        posterior = state

        diagnostics: list[dict] = []
        knots = 0
        gap = 0
        while state.knot_times[2] <= end_time:
            start, end = float(state.knot_times[2]), float(state.knot_times[3])
            seg_scans = radar.scans_between(start, end)
            seg_imu = imu.between(start, end)
            if not seg_scans and len(seg_imu) == 0:
                gap += 1
                if gap > c.max_gap_knots:
                    raise StreamGapError(
                        f"no measurements for {gap} knots ending at t={end:.3f}",
                        checkpoint=self._checkpoint(posterior, state, traj_times, traj_pos, traj_quat),
                    )
                record = {"knot": int(state.knot_index), "t_start": start, "t_end": end, "status": "gap"}
            else:
                gap = 0
                state, record = self.process_knot(state, seg_scans, seg_imu)
                posterior = state
            diagnostics.append(record)
            diagnostics_logger.info(json.dumps(record, sort_keys=True))

            stamps = [start] + [s.stamp for s in seg_scans if start < s.stamp < end]
            self._sample(state, sorted(set(stamps)), traj_times, traj_pos, traj_quat)
            knots += 1
            if state.knot_times[3] > end_time:
                break
            state = self.filter.predict(state)

        runtime = time.perf_counter() - started
        trajectory = TrajectoryEstimate(np.asarray(traj_times), np.asarray(traj_pos), np.asarray(traj_quat))
        logger.info("Processed %d knots in %.2f s; map holds %d points", knots, runtime, len(self.map))
        return OdometryResult(trajectory, self.map.arrays(), diagnostics, knots, runtime, state)

    def _reanchor(self, state: FilterState, times: np.ndarray) -> FilterState:
        """Window at rest at the checkpointed pose, advanced to the first pending measurement.

        Nothing observes the platform across a gap, so the pose is held instead
        of extrapolated and its covariance grows by one process step per skipped knot.
        """
        c = self.config
        window = state_to_window(state)
        terms = pose_terms(window, window.start)
        pose = self.uncertainty.pose_covariance(state, window.start, terms=terms)
        knot_times = state.knot_times.copy()
        skipped = 0
        pending = times[times >= knot_times[2]]
        if pending.size:
            first = float(pending.min())
            dt = float(knot_times[1] - knot_times[0])
            while knot_times[3] <= first:
                knot_times = knot_times + dt
                skipped += 1

        eye = np.eye(3)
        step_t = max(c.process_sigma_translation**2, 1e-12)
        step_r = max(c.process_sigma_rotation**2, 1e-12)
        x = state.x.copy()
        x[TRANSLATION] = np.tile(terms.position, 4)
        x[ROTATION] = 0.0
        P = np.zeros_like(state.P)
        P[TRANSLATION, TRANSLATION] = np.kron(np.ones((4, 4)), pose.translation + skipped * step_t * eye) + np.kron(
            np.eye(4), step_t * eye
        )
        P[ROTATION, ROTATION] = np.kron(np.eye(4), step_r * eye)
        P[24:, 24:] = state.P[24:, 24:]  # biases
        lag_cov = pose.rotation + skipped * step_r * eye
        logger.info("Re-anchored at t=%.3f after %d skipped knots", knot_times[2], skipped)
        return FilterState(
            x,
            0.5 * (P + P.T),
            terms.quat / np.linalg.norm(terms.quat),
            0.5 * (lag_cov + lag_cov.T),
            state.knot_index + skipped,
            knot_times,
        )

    def _sample(self, state: FilterState, stamps: list[float], times: list, positions: list, quats: list) -> None:
        window = state_to_window(state)
        for t in stamps:
            if times and t <= times[-1]:
                continue
            terms = pose_terms(window, t, jacobians=False)
            times.append(t)
            positions.append(terms.position)
            quats.append(terms.quat)

    def _checkpoint(self, posterior: FilterState, state: FilterState, times: list, positions: list, quats: list) -> Checkpoint:
        """Snapshot for a later resume; the filter state is the last one a measurement update produced."""
        previous = self.preprocess.previous
        return Checkpoint(
            state=posterior.copy(),
            map_arrays=self.map.arrays(),
            trajectory=TrajectoryEstimate(np.asarray(times), np.asarray(positions).reshape(-1, 3), np.asarray(quats).reshape(-1, 4)),
            gravity=self.gravity.copy(),
            ego_velocity=None if previous is None else previous.velocity.copy(),
            meta={"knot_index": int(state.knot_index), "resume_time": float(state.knot_times[2])},
        )


def run_odometry(
    config: PipelineConfig,
    scans: Sequence[RadarScan],
    imu: ImuData,
    resume: Optional[Checkpoint] = None,
) -> OdometryResult:
    return OdometryService(config).run(scans, imu, resume=resume)
