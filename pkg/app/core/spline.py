# app/core/spline.py
"""
Uniform cubic B-spline pose trajectory.

Translation is the standard cubic B-spline over four control points; the
orientation is a cumulative quaternion spline anchored at a lagged quaternion
that precedes the active window:

    q(t) = q_lag (x) Exp(l_0 d_0) (x) Exp(l_1 d_1) (x) Exp(l_2 d_2) (x) Exp(l_3 d_3)

with l_0 == 1. Evaluation of a window is only defined on [t_{i-1}, t_i), i.e.
between its second-to-last and last knot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.core.errors import ContractViolation, OutOfWindowError
from app.core.geometry import (
    IDENTITY_QUAT,
    quat_conj,
    quat_exp,
    quat_exp_jacobian,
    quat_left_matrix,
    quat_log,
    quat_mul,
    quat_right_matrix,
    quat_to_rotmat,
    rotate_transpose_jacobian,
)

BASIS_MATRIX = np.array(
    [
        [1.0, -3.0, 3.0, -1.0],
        [4.0, 0.0, -6.0, 3.0],
        [1.0, 3.0, 3.0, -3.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
) / 6.0

CUMULATIVE_MATRIX = np.array(
    [
        [6.0, 0.0, 0.0, 0.0],
        [5.0, 3.0, -3.0, 1.0],
        [1.0, 3.0, 3.0, -2.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
) / 6.0

KNOT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class BasisWeights:
    u: float
    dt: float
    m: np.ndarray
    m_dot: np.ndarray
    m_ddot: np.ndarray
    lam: np.ndarray
    lam_dot: np.ndarray
    lam_ddot: np.ndarray


def basis(u: float, dt: float) -> BasisWeights:
    if not (0.0 <= u < 1.0):
        raise ContractViolation(f"spline parameter u={u!r} outside [0, 1)")
    if dt <= 0.0:
        raise ContractViolation(f"knot interval must be positive, got {dt!r}")
    ubar = np.array([1.0, u, u * u, u * u * u])
    ubar_dot = np.array([0.0, 1.0, 2.0 * u, 3.0 * u * u]) / dt
    ubar_ddot = np.array([0.0, 0.0, 2.0, 6.0 * u]) / (dt * dt)
    return BasisWeights(
        u=u,
        dt=dt,
        m=BASIS_MATRIX @ ubar,
        m_dot=BASIS_MATRIX @ ubar_dot,
        m_ddot=BASIS_MATRIX @ ubar_ddot,
        lam=CUMULATIVE_MATRIX @ ubar,
        lam_dot=CUMULATIVE_MATRIX @ ubar_dot,
        lam_ddot=CUMULATIVE_MATRIX @ ubar_ddot,
    )


def translation_jacobian(u: float, dt: float = 1.0, order: int = 0) -> np.ndarray:
    """B(u) = [m0 I, m1 I, m2 I, m3 I] (3x12); ``order`` 1/2 gives the velocity/acceleration forms."""
    weights = basis(u, dt)
    m = (weights.m, weights.m_dot, weights.m_ddot)[order]
    return np.kron(m[None, :], np.eye(3))


@dataclass
class SplineWindow:
    """Active segment: knots t_{i-3..i}, control points, increments and the lagged quaternion."""

    knot_times: np.ndarray
    control_points: np.ndarray
    increments: np.ndarray
    lag_quat: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self) -> None:
        self.knot_times = np.asarray(self.knot_times, dtype=float).reshape(4)
        self.control_points = np.asarray(self.control_points, dtype=float).reshape(4, 3)
        self.increments = np.asarray(self.increments, dtype=float).reshape(4, 3)
        self.lag_quat = np.asarray(self.lag_quat, dtype=float).reshape(4)
        steps = np.diff(self.knot_times)
        if np.any(steps <= 0.0) or np.ptp(steps) > KNOT_TOLERANCE:
            raise ContractViolation(f"knots must be uniform and increasing, got {self.knot_times.tolist()}")

    @property
    def dt(self) -> float:
        return float(self.knot_times[1] - self.knot_times[0])

    @property
    def start(self) -> float:
        return float(self.knot_times[2])

    @property
    def end(self) -> float:
        return float(self.knot_times[3])

    def contains(self, t: float) -> bool:
        return self.start - KNOT_TOLERANCE <= t < self.end

    def locate(self, t: float) -> float:
        if not self.contains(t):
            raise OutOfWindowError(t, self.start, self.end)
        return max((t - self.start) / self.dt, 0.0)


@dataclass(frozen=True)
class PoseTerms:
    """Everything the residual models need about the trajectory at one timestamp."""

    t: float
    weights: BasisWeights
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    quat: np.ndarray
    rotation: np.ndarray
    angular_velocity: np.ndarray
    B: np.ndarray
    B_dot: np.ndarray
    B_ddot: np.ndarray
    dq_dxq: Optional[np.ndarray] = None
    dq_dlag: Optional[np.ndarray] = None
    domega_dxq: Optional[np.ndarray] = None


@dataclass(frozen=True)
class OrientationJacobians:
    increments: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    lag: np.ndarray


def _orientation_chain(window: SplineWindow, weights: BasisWeights):
    nus = weights.lam[:, None] * window.increments
    factors = [quat_exp(nu) for nu in nus]
    prefix = [window.lag_quat]
    for a in factors:
        prefix.append(quat_mul(prefix[-1], a))
    suffix = [IDENTITY_QUAT.copy() for _ in range(4)]
    for k in range(2, -1, -1):
        suffix[k] = quat_mul(factors[k + 1], suffix[k + 1])
    return nus, factors, prefix, suffix


def pose_terms(window: SplineWindow, t: float, jacobians: bool = True) -> PoseTerms:
    u = window.locate(t)
    weights = basis(u, window.dt)
    cps = window.control_points
    nus, factors, prefix, suffix = _orientation_chain(window, weights)
    quat = prefix[4]

    rot_suffix = [quat_to_rotmat(s) for s in suffix]
    omega = np.zeros(3)
    for k in range(4):
        omega += rot_suffix[k].T @ (weights.lam_dot[k] * window.increments[k])

    terms = dict(
        t=t,
        weights=weights,
        position=weights.m @ cps,
        velocity=weights.m_dot @ cps,
        acceleration=weights.m_ddot @ cps,
        quat=quat,
        rotation=quat_to_rotmat(quat),
        angular_velocity=omega,
        B=np.kron(weights.m[None, :], np.eye(3)),
        B_dot=np.kron(weights.m_dot[None, :], np.eye(3)),
        B_ddot=np.kron(weights.m_ddot[None, :], np.eye(3)),
    )
    if not jacobians:
        return PoseTerms(**terms)

    exp_jacs = [quat_exp_jacobian(nu) for nu in nus]
    # dS_k/dd_j for j > k: L(A_{k+1} ... A_{j-1}) R(S_j) dExp_j l_j
    dq_dxq = np.zeros((4, 12))
    domega_dxq = np.zeros((3, 12))
    for j in range(4):
        tail = quat_right_matrix(suffix[j]) @ exp_jacs[j] * weights.lam[j]
        dq_dxq[:, 3 * j : 3 * j + 3] = quat_left_matrix(prefix[j]) @ tail
        block = weights.lam_dot[j] * rot_suffix[j].T
        mid = IDENTITY_QUAT.copy()
        for k in range(j - 1, -1, -1):
            if weights.lam_dot[k] != 0.0:
                d_suffix = quat_left_matrix(mid) @ tail
                block = block + rotate_transpose_jacobian(suffix[k], weights.lam_dot[k] * window.increments[k]) @ d_suffix
            mid = quat_mul(factors[k], mid)
        domega_dxq[:, 3 * j : 3 * j + 3] = block

    total = quat_mul(quat_mul(factors[0], factors[1]), quat_mul(factors[2], factors[3]))
    return PoseTerms(
        **terms,
        dq_dxq=dq_dxq,
        dq_dlag=quat_right_matrix(total),
        domega_dxq=domega_dxq,
    )


def eval_translation(window: SplineWindow, t: float) -> np.ndarray:
    weights = basis(window.locate(t), window.dt)
    return weights.m @ window.control_points


def eval_velocity(window: SplineWindow, t: float) -> np.ndarray:
    weights = basis(window.locate(t), window.dt)
    return weights.m_dot @ window.control_points


def eval_acceleration(window: SplineWindow, t: float) -> np.ndarray:
    weights = basis(window.locate(t), window.dt)
    return weights.m_ddot @ window.control_points


def eval_orientation(window: SplineWindow, t: float) -> np.ndarray:
    weights = basis(window.locate(t), window.dt)
    return _orientation_chain(window, weights)[2][4]


def eval_angular_velocity(window: SplineWindow, t: float) -> np.ndarray:
    return pose_terms(window, t, jacobians=False).angular_velocity


def orientation_jacobians(window: SplineWindow, t: float) -> OrientationJacobians:
    terms = pose_terms(window, t)
    blocks = tuple(terms.dq_dxq[:, 3 * j : 3 * j + 3] for j in range(4))
    return OrientationJacobians(increments=blocks, lag=terms.dq_dlag)


@dataclass(frozen=True)
class SplineSamples:
    times: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    quat: np.ndarray
    angular_velocity: np.ndarray


class GlobalSpline:
    """
    A whole trajectory given by N control poses on a uniform grid.

    knot_time(n) = origin + n * dt. Orientation control points are full
    quaternions; the increments are d_n = Log(q_{n-1}^-1 q_n). Valid for
    t in [knot_time(3), knot_time(N - 1)).
    """

    def __init__(self, origin: float, dt: float, positions: np.ndarray, quats: np.ndarray) -> None:
        positions = np.asarray(positions, dtype=float)
        quats = np.asarray(quats, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3 or quats.shape != (positions.shape[0], 4):
            raise ContractViolation("positions must be (N, 3) and quats (N, 4)")
        if positions.shape[0] < 5:
            raise ContractViolation("a global spline needs at least 5 control poses")
        self.origin = float(origin)
        self.dt = float(dt)
        self.positions = positions
        self.quats = quats
        self.increments = np.zeros_like(positions)
        self.increments[1:] = quat_log(quat_mul(quat_conj(quats[:-1]), quats[1:]))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def start(self) -> float:
        return self.knot_time(3)

    @property
    def end(self) -> float:
        return self.knot_time(self.count - 1)

    def knot_time(self, n: int) -> float:
        return self.origin + n * self.dt

    def segment_index(self, t: float) -> int:
        if not (self.start - KNOT_TOLERANCE <= t < self.end):
            raise OutOfWindowError(t, self.start, self.end)
        i = int(np.floor((t - self.origin) / self.dt + KNOT_TOLERANCE)) + 1
        return min(max(i, 4), self.count - 1)

    def window_at(self, t: float) -> SplineWindow:
        i = self.segment_index(t)
        return SplineWindow(
            knot_times=[self.knot_time(n) for n in range(i - 3, i + 1)],
            control_points=self.positions[i - 3 : i + 1],
            increments=self.increments[i - 3 : i + 1],
            lag_quat=self.quats[i - 4],
        )

    def sample(self, times: np.ndarray) -> SplineSamples:
        """Vectorized evaluation of pose, derivatives and body angular velocity."""
        times = np.asarray(times, dtype=float)
        idx = np.array([self.segment_index(float(t)) for t in times], dtype=int)
        u = np.clip((times - (self.origin + (idx - 1) * self.dt)) / self.dt, 0.0, np.nextafter(1.0, 0.0))
        ubar = np.stack([np.ones_like(u), u, u * u, u**3], axis=-1)
        ubar_dot = np.stack([np.zeros_like(u), np.ones_like(u), 2.0 * u, 3.0 * u * u], axis=-1) / self.dt
        ubar_ddot = np.stack([np.zeros_like(u), np.zeros_like(u), 2.0 * np.ones_like(u), 6.0 * u], axis=-1) / self.dt**2
        m, m_dot, m_ddot = (x @ BASIS_MATRIX.T for x in (ubar, ubar_dot, ubar_ddot))
        lam, lam_dot = ubar @ CUMULATIVE_MATRIX.T, ubar_dot @ CUMULATIVE_MATRIX.T

        window_ids = idx[:, None] + np.arange(-3, 1)[None, :]
        cps = self.positions[window_ids]
        deltas = self.increments[window_ids]
        position = np.einsum("nk,nkd->nd", m, cps)
        velocity = np.einsum("nk,nkd->nd", m_dot, cps)
        acceleration = np.einsum("nk,nkd->nd", m_ddot, cps)

        factors = quat_exp(lam[..., None] * deltas)
        quat = self.quats[idx - 4]
        for k in range(4):
            quat = quat_mul(quat, factors[:, k])

        omega = np.zeros_like(position)
        suffix = np.tile(IDENTITY_QUAT, (len(times), 1))
        for k in range(3, -1, -1):
            rot = quat_to_rotmat(suffix)
            omega += np.einsum("nji,nj->ni", rot, lam_dot[:, k, None] * deltas[:, k])
            suffix = quat_mul(factors[:, k], suffix)
        return SplineSamples(times, position, velocity, acceleration, quat, omega)
