# app/services/filter_service.py
"""
Iterated EKF over the 30-dim spline state.

Prediction shifts the window by one knot (the oldest increment is folded into
the lagged quaternion). The update runs Gauss-Newton on the MAP objective in
information form. Under-constrained directions of the newest knot are held
fixed: each step minimizes the model over the remaining subspace and is then
projected with (I - Upsilon C).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from app.core.errors import DivergenceError
from app.core.geometry import quat_exp, quat_exp_jacobian, quat_left_matrix, quat_mul, quat_to_rotmat, tangent_unlift
from app.models.domain import (
    STATE_DIM,
    ConstraintMatrix,
    FilterState,
    ResidualBlock,
    UpdateReport,
)
from app.services.localizability_service import project_increment

logger = logging.getLogger(__name__)

# newest translation control point and newest orientation increment
POSE_INCREMENT = np.r_[9:12, 21:24]

Assembler = Callable[[FilterState], Sequence[ResidualBlock]]


@dataclass(frozen=True)
class ProcessModel:
    A: np.ndarray
    Q: np.ndarray


def translation_transition() -> np.ndarray:
    I = np.eye(3)
    Z = np.zeros((3, 3))
    return np.block([[Z, I, Z, Z], [Z, Z, I, Z], [Z, Z, Z, I], [-I, Z, 2 * I, Z]])


def rotation_transition() -> np.ndarray:
    I = np.eye(3)
    Z = np.zeros((3, 3))
    return np.block([[Z, I, Z, Z], [Z, Z, I, Z], [Z, Z, Z, I], [Z, I, Z, Z]])


def build_process_model(
    sigma_translation: float,
    sigma_rotation: float,
    sigma_accel_bias: float,
    sigma_gyro_bias: float,
) -> ProcessModel:
    A = np.eye(STATE_DIM)
    A[0:12, 0:12] = translation_transition()
    A[12:24, 12:24] = rotation_transition()
    q = np.zeros(STATE_DIM)
    q[9:12] = sigma_translation**2
    q[21:24] = sigma_rotation**2
    q[24:27] = sigma_accel_bias**2
    q[27:30] = sigma_gyro_bias**2
    return ProcessModel(A, np.diag(q))


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def predict(state: FilterState, model: ProcessModel) -> FilterState:
    """Advance one knot: x <- A x, P <- A P A^T + Q, and fold the oldest increment into the lag."""
    delta0 = state.x[12:15].copy()
    fold = quat_exp(delta0)
    new_lag = quat_mul(state.lag_quat, fold)
    new_lag = new_lag / np.linalg.norm(new_lag)

    R0 = quat_to_rotmat(fold)
    J = tangent_unlift(new_lag) @ quat_left_matrix(state.lag_quat) @ quat_exp_jacobian(delta0)
    lag_cov = R0.T @ state.lag_cov @ R0 + J @ state.P[12:15, 12:15] @ J.T

    x = model.A @ state.x
    P = _sym(model.A @ state.P @ model.A.T + model.Q)
    dt = float(state.knot_times[1] - state.knot_times[0])
    return FilterState(x, P, new_lag, _sym(lag_cov), state.knot_index + 1, state.knot_times + dt)


def information_gain(H: np.ndarray, R: np.ndarray, P: np.ndarray) -> np.ndarray:
    """K = (H^T R^-1 H + P^-1)^-1 H^T R^-1."""
    Rinv = np.linalg.inv(R)
    return np.linalg.solve(H.T @ Rinv @ H + np.linalg.inv(P), H.T @ Rinv)


def covariance_gain(H: np.ndarray, R: np.ndarray, P: np.ndarray) -> np.ndarray:
    """K = P H^T (H P H^T + R)^-1."""
    return P @ H.T @ np.linalg.inv(H @ P @ H.T + R)


def _whiten(blocks: Sequence[ResidualBlock]) -> tuple[np.ndarray, np.ndarray]:
    """Stack blocks as L^-1 H, L^-1 r with R = L L^T."""
    Hs, rs = [], []
    for block in blocks:
        if block.dim == 1:
            scale = 1.0 / np.sqrt(block.covariance[0, 0])
            Hs.append(block.jacobian * scale)
            rs.append(block.residual * scale)
            continue
        L = np.linalg.cholesky(block.covariance)
        Hs.append(solve_triangular(L, block.jacobian, lower=True))
        rs.append(solve_triangular(L, block.residual, lower=True))
    return np.vstack(Hs), np.concatenate(rs)


def _solve(S: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """(S^-1 g, S^-1, regularized)."""
    try:
        factor = cho_factor(S)
        return cho_solve(factor, g), cho_solve(factor, np.eye(S.shape[0])), False
    except LinAlgError:
        reg = S + max(1e-9 * np.trace(S) / S.shape[0], 1e-12) * np.eye(S.shape[0])
        logger.warning("Normal matrix not positive definite; using regularized solve")
        inv = np.linalg.pinv(reg)
        return inv @ g, inv, True


def _constrained_step(S: np.ndarray, g: np.ndarray, constraints: ConstraintMatrix) -> np.ndarray:
    """Minimizer of the quadratic model with the constrained newest-pose directions held fixed."""
    E = np.zeros((constraints.dim, STATE_DIM))
    E[:, POSE_INCREMENT] = constraints.C
    _, _, vt = np.linalg.svd(E)
    N = vt[constraints.dim :].T
    return N @ np.linalg.solve(N.T @ S @ N, N.T @ g)


def iterated_update(
    state: FilterState,
    assemble: Assembler,
    constraints: ConstraintMatrix,
    epsilon: float = 1e-4,
    max_iters: int = 10,
) -> tuple[FilterState, UpdateReport]:
    x_prior = state.x.copy()
    try:
        P_inv = cho_solve(cho_factor(state.P), np.eye(STATE_DIM))
    except LinAlgError:
        P_inv = np.linalg.pinv(state.P)
    current = state.copy()
    S_inv = state.P
    regularized = False
    converged = False
    increases = 0
    last_objective = np.inf
    objective = 0.0
    count = 0
    iteration = 0

    for iteration in range(1, max_iters + 1):
        blocks = list(assemble(current))
        if not blocks:
            if iteration == 1:
                logger.warning("No residual blocks for knot %d; state left unchanged", state.knot_index)
                return state.copy(), UpdateReport(0, False, "empty", 0)
            break
        count = len(blocks)
        Hw, rw = _whiten(blocks)
        offset = current.x - x_prior
        objective = float(offset @ P_inv @ offset + rw @ rw)
        if objective > last_objective * (1.0 + 1e-12):
            increases += 1
            logger.warning("MAP objective increased at iteration %d (%.6g -> %.6g)", iteration, last_objective, objective)
        last_objective = objective

        S = Hw.T @ Hw + P_inv
        g = Hw.T @ rw - P_inv @ offset
        dx, S_inv, reg = _solve(S, g)
        regularized = regularized or reg
        if constraints.dim:
            try:
                dx = _constrained_step(S, g, constraints)
            except LinAlgError:
                logger.warning("Constrained step failed at knot %d; projecting the free step", state.knot_index)
            dx[POSE_INCREMENT] = project_increment(dx[POSE_INCREMENT], constraints)
        current.x = current.x + dx
        if np.linalg.norm(dx) < epsilon:
            converged = True
            break

    current.P = _sym(S_inv)
    status = "regularized" if regularized else "ok"
    return current, UpdateReport(iteration, converged, status, count, objective, increases)


def check_divergence(state: FilterState, trace_limit: float) -> None:
    if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.P))):
        raise DivergenceError(f"non-finite filter state at knot {state.knot_index}")
    trace = float(np.trace(state.P))
    if trace > trace_limit:
        raise DivergenceError(f"covariance trace {trace:.3g} exceeds {trace_limit:.3g} at knot {state.knot_index}")


def initial_state(
    t0: float,
    knot_interval: float,
    orientation: np.ndarray,
    gyro_bias: np.ndarray,
    *,
    sigma_translation: float,
    sigma_rotation: float,
    sigma_accel_bias: float,
    sigma_gyro_bias: float,
    accel_bias: np.ndarray | None = None,
) -> FilterState:
    """Window at rest at the origin with orientation ``orientation``; first segment starts at t0."""
    x = np.zeros(STATE_DIM)
    if accel_bias is not None:
        x[24:27] = accel_bias
    x[27:30] = gyro_bias
    var = np.concatenate(
        [
            np.full(12, sigma_translation**2),
            np.full(12, sigma_rotation**2),
            np.full(3, sigma_accel_bias**2),
            np.full(3, sigma_gyro_bias**2),
        ]
    )
    knot_times = t0 + knot_interval * np.array([-2.0, -1.0, 0.0, 1.0])
    return FilterState(x, np.diag(var), np.asarray(orientation, dtype=float).copy(), sigma_rotation**2 * np.eye(3), 3, knot_times)


class FilterService:
    def __init__(self, model: ProcessModel, epsilon: float = 1e-4, max_iters: int = 10, divergence_trace: float = 1e6) -> None:
        self.model = model
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.divergence_trace = divergence_trace

    def predict(self, state: FilterState) -> FilterState:
        return predict(state, self.model)

    def update(self, state: FilterState, assemble: Assembler, constraints: ConstraintMatrix) -> tuple[FilterState, UpdateReport]:
        posterior, report = iterated_update(state, assemble, constraints, self.epsilon, self.max_iters)
        check_divergence(posterior, self.divergence_trace)
        return posterior, report
