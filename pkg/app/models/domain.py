# app/models/domain.py
"""Internal dataclasses shared by the services. Units: meters, seconds, radians, dBsm."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional

import numpy as np

from app.core.errors import ContractViolation
from app.core.geometry import SphericalCoord, spherical_to_cartesian_array
from app.core.spline import SplineWindow

# 30-dim state layout: 4 translation control points, 4 orientation increments, b_a, b_g
STATE_DIM = 30
TRANSLATION = slice(0, 12)
ROTATION = slice(12, 24)
ACCEL_BIAS = slice(24, 27)
GYRO_BIAS = slice(27, 30)
NEWEST_TRANSLATION = slice(9, 12)
NEWEST_ROTATION = slice(21, 24)

ResidualSource = Literal["plane", "distribution", "doppler", "gyro", "gravity", "linear"]


@dataclass(frozen=True)
class RadarPoint:
    time: float
    coord: SphericalCoord
    doppler: float
    rcs: float


@dataclass
class RadarScan:
    """One radar frame in column form; ``stamp`` is the frame start time."""

    stamp: float
    times: np.ndarray
    ranges: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    dopplers: np.ndarray
    rcs: np.ndarray
    scan_id: int = 0

    def __post_init__(self) -> None:
        cols = [np.asarray(c, dtype=float).reshape(-1) for c in (self.times, self.ranges, self.azimuths, self.elevations, self.dopplers, self.rcs)]
        if len({c.shape[0] for c in cols}) != 1:
            raise ContractViolation("radar scan columns must have equal length")
        self.times, self.ranges, self.azimuths, self.elevations, self.dopplers, self.rcs = cols

    @classmethod
    def from_points(cls, stamp: float, points: list[RadarPoint], scan_id: int = 0) -> "RadarScan":
        return cls(
            stamp=stamp,
            times=[p.time for p in points],
            ranges=[p.coord.range_m for p in points],
            azimuths=[p.coord.azimuth_rad for p in points],
            elevations=[p.coord.elevation_rad for p in points],
            dopplers=[p.doppler for p in points],
            rcs=[p.rcs for p in points],
            scan_id=scan_id,
        )

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def __iter__(self) -> Iterator[RadarPoint]:
        for i in range(len(self)):
            yield RadarPoint(
                float(self.times[i]),
                SphericalCoord(float(self.ranges[i]), float(self.azimuths[i]), float(self.elevations[i])),
                float(self.dopplers[i]),
                float(self.rcs[i]),
            )

    def select(self, mask: np.ndarray) -> "RadarScan":
        return RadarScan(
            self.stamp,
            self.times[mask],
            self.ranges[mask],
            self.azimuths[mask],
            self.elevations[mask],
            self.dopplers[mask],
            self.rcs[mask],
            scan_id=self.scan_id,
        )

    def cartesian(self) -> np.ndarray:
        return spherical_to_cartesian_array(self.ranges, self.azimuths, self.elevations)

    def directions(self) -> np.ndarray:
        return spherical_to_cartesian_array(np.ones_like(self.ranges), self.azimuths, self.elevations)


@dataclass
class ImuData:
    times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (self.times.shape[0] == self.gyro.shape[0] == self.accel.shape[0]):
            raise ContractViolation("IMU columns must have equal length")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def between(self, start: float, end: float) -> "ImuData":
        mask = (self.times >= start) & (self.times < end)
        return ImuData(self.times[mask], self.gyro[mask], self.accel[mask])


@dataclass(frozen=True)
class EgoVelocity:
    velocity: np.ndarray
    inliers: int
    valid: bool
    reused: bool = False

    @classmethod
    def invalid(cls) -> "EgoVelocity":
        return cls(np.zeros(3), 0, False)


@dataclass(frozen=True)
class Extrinsics:
    """Radar-to-IMU transform: p_I = rotation @ p_R + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class MapPoint:
    position: np.ndarray
    covariance: np.ndarray
    rcs: float = 0.0
    stamp: float = 0.0
    trace: float = field(init=False)

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        self.trace = float(np.trace(self.covariance))


@dataclass(frozen=True)
class KnnResult:
    points: list[MapPoint]
    distances: np.ndarray
    short: bool


@dataclass
class InsertReport:
    inserted: int = 0
    replaced: int = 0
    rejected: int = 0
    dropped: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"inserted": self.inserted, "replaced": self.replaced, "rejected": self.rejected, "dropped": self.dropped}


@dataclass(frozen=True)
class ResidualBlock:
    """``residual`` is z - h(x); ``jacobian`` is dh/dx over the 30-dim state."""

    residual: np.ndarray
    jacobian: np.ndarray
    covariance: np.ndarray
    source: ResidualSource

    def __post_init__(self) -> None:
        r = np.atleast_1d(np.asarray(self.residual, dtype=float))
        h = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        c = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if h.shape != (r.shape[0], STATE_DIM) or c.shape != (r.shape[0], r.shape[0]):
            raise ContractViolation(f"{self.source} block has inconsistent shapes {r.shape} {h.shape} {c.shape}")
        object.__setattr__(self, "residual", r)
        object.__setattr__(self, "jacobian", h)
        object.__setattr__(self, "covariance", c)

    @property
    def dim(self) -> int:
        return int(self.residual.shape[0])


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    point: np.ndarray
    covariance: np.ndarray
    reliable: bool
    rms: float
    weights: np.ndarray


@dataclass(frozen=True)
class RcsDistribution:
    centroid: np.ndarray
    mean_rcs: float
    member_rcs: np.ndarray


@dataclass(frozen=True)
class EnvWeights:
    plane: float
    point: float


@dataclass(frozen=True)
class PoseCovariance:
    translation: np.ndarray
    rotation: np.ndarray
    quaternion: Optional[np.ndarray] = None


@dataclass(frozen=True)
class WorldPointCovariance:
    covariance: np.ndarray
    trace: float


@dataclass(frozen=True)
class LocalizabilityHessian:
    matrix: np.ndarray

    @property
    def translation_block(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def rotation_block(self) -> np.ndarray:
        return self.matrix[3:, 3:]


@dataclass(frozen=True)
class ConstraintMatrix:
    """Rows of ``C`` are orthonormal directions in the 6-DoF (translation, rotation) increment."""

    C: np.ndarray
    upsilon: np.ndarray
    axes: tuple[str, ...] = ()
    eigenvalues: Optional[np.ndarray] = None
    informative_counts: Optional[np.ndarray] = None

    @classmethod
    def empty(cls) -> "ConstraintMatrix":
        return cls(np.zeros((0, 6)), np.zeros((6, 0)))

    @property
    def dim(self) -> int:
        return int(self.C.shape[0])


@dataclass
class FilterState:
    """Spline state x (30), covariance P (30x30), lagged quaternion and its rotation-vector covariance."""

    x: np.ndarray
    P: np.ndarray
    lag_quat: np.ndarray
    lag_cov: np.ndarray
    knot_index: int
    knot_times: np.ndarray

    def copy(self) -> "FilterState":
        return FilterState(
            self.x.copy(), self.P.copy(), self.lag_quat.copy(), self.lag_cov.copy(), self.knot_index, self.knot_times.copy()
        )

    @property
    def control_points(self) -> np.ndarray:
        return self.x[TRANSLATION].reshape(4, 3)

    @property
    def increments(self) -> np.ndarray:
        return self.x[ROTATION].reshape(4, 3)

    @property
    def accel_bias(self) -> np.ndarray:
        return self.x[ACCEL_BIAS]

    @property
    def gyro_bias(self) -> np.ndarray:
        return self.x[GYRO_BIAS]

    def translation_covs(self) -> list[np.ndarray]:
        return [self.P[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] for k in range(4)]

    def increment_covs(self) -> list[np.ndarray]:
        return [self.P[12 + 3 * k : 15 + 3 * k, 12 + 3 * k : 15 + 3 * k] for k in range(4)]


def state_to_window(state: FilterState) -> SplineWindow:
    return SplineWindow(
        knot_times=state.knot_times.copy(),
        control_points=state.control_points.copy(),
        increments=state.increments.copy(),
        lag_quat=state.lag_quat.copy(),
    )


def window_to_state(
    window: SplineWindow,
    accel_bias: np.ndarray,
    gyro_bias: np.ndarray,
    P: np.ndarray,
    lag_cov: np.ndarray,
    knot_index: int,
) -> FilterState:
    x = np.concatenate([window.control_points.reshape(-1), window.increments.reshape(-1), accel_bias, gyro_bias])
    return FilterState(x, np.asarray(P, dtype=float), window.lag_quat.copy(), np.asarray(lag_cov, dtype=float), knot_index, window.knot_times.copy())


@dataclass(frozen=True)
class UpdateReport:
    iterations: int
    converged: bool
    status: Literal["ok", "empty", "regularized"]
    residual_count: int
    objective: float = 0.0
    objective_increases: int = 0


@dataclass
class TrajectoryEstimate:
    times: np.ndarray
    positions: np.ndarray
    quats: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        if not (self.times.shape[0] == self.positions.shape[0] == self.quats.shape[0]):
            raise ContractViolation("trajectory columns must have equal length")
        if self.times.shape[0] > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ContractViolation("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.times.shape[0])
