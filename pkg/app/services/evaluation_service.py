# app/services/evaluation_service.py
"""ATE / RPE against a reference trajectory."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.errors import EvaluationError
from app.core.geometry import quat_conj, quat_log, quat_mul, quat_to_rotmat, rotmat_to_quat
from app.models.domain import TrajectoryEstimate

logger = logging.getLogger(__name__)

MAX_TIME_DIFF = 0.01
MIN_PAIRS = 10
RPE_SEGMENT = 1.0


@dataclass(frozen=True)
class Metrics:
    ate: float
    rpe_t: float
    rpe_r: float
    pairs: int
    aligned: bool

    def as_dict(self) -> dict[str, float | int | bool]:
        return {"ate": self.ate, "rpe_t": self.rpe_t, "rpe_r": self.rpe_r, "pairs": self.pairs, "aligned": self.aligned}


def associate(est: TrajectoryEstimate, gt: TrajectoryEstimate, max_diff: float = MAX_TIME_DIFF) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (est, gt) matched by nearest timestamp within ``max_diff``; each gt pose used once."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.clip(np.searchsorted(gt.times, est.times), 1, len(gt) - 1) if len(gt) > 1 else np.zeros(len(est), dtype=int)
    left = np.maximum(pos - 1, 0)
    nearest = np.where(np.abs(gt.times[left] - est.times) <= np.abs(gt.times[pos] - est.times), left, pos)
    ok = np.abs(gt.times[nearest] - est.times) <= max_diff
    est_ids = np.flatnonzero(ok)
    gt_ids = nearest[ok]
    _, first = np.unique(gt_ids, return_index=True)
    first = np.sort(first)
    return est_ids[first], gt_ids[first]


def umeyama(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing sum |target - (R source + t)|^2; inputs are (N, 3)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    W = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def _relative(positions: np.ndarray, rots: np.ndarray, i: np.ndarray, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rel_rot = np.einsum("nki,nkj->nij", rots[i], rots[j])
    rel_pos = np.einsum("nki,nk->ni", rots[i], positions[j] - positions[i])
    return rel_pos, rel_rot


def relative_pose_error(
    est_pos: np.ndarray,
    est_quat: np.ndarray,
    gt_pos: np.ndarray,
    gt_quat: np.ndarray,
    segment: float = RPE_SEGMENT,
) -> tuple[float, float]:
    """Mean translational (m/m) and rotational (deg/m) drift over path segments of length ``segment``."""
    steps = np.linalg.norm(np.diff(gt_pos, axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    j = np.searchsorted(dist, dist + segment)
    i = np.flatnonzero(j < dist.shape[0])
    if i.size == 0:
        logger.info("Trajectory shorter than %.2f m; RPE reported as 0", segment)
        return 0.0, 0.0
    j = j[i]
    length = dist[j] - dist[i]
    gt_rot, est_rot = quat_to_rotmat(gt_quat), quat_to_rotmat(est_quat)
    gt_dp, gt_dr = _relative(gt_pos, gt_rot, i, j)
    est_dp, est_dr = _relative(est_pos, est_rot, i, j)
    # error transform E = gt_rel^-1 est_rel
    err_t = np.einsum("nki,nk->ni", gt_dr, est_dp - gt_dp)
    err_r = np.einsum("nki,nkj->nij", gt_dr, est_dr)
    angle = np.linalg.norm(quat_log(rotmat_to_quat(err_r)), axis=-1)
    rpe_t = float(np.mean(np.linalg.norm(err_t, axis=1) / length))
    rpe_r = float(np.mean(np.rad2deg(angle) / length))
    return rpe_t, rpe_r


def evaluate(est: TrajectoryEstimate, gt: TrajectoryEstimate, align: bool = True) -> Metrics:
    est_ids, gt_ids = associate(est, gt)
    if est_ids.shape[0] < MIN_PAIRS:
        raise EvaluationError(f"only {est_ids.shape[0]} poses associated within {MAX_TIME_DIFF * 1e3:.0f} ms (need {MIN_PAIRS})")
    e_pos, e_quat = est.positions[est_ids], est.quats[est_ids]
    g_pos, g_quat = gt.positions[gt_ids], gt.quats[gt_ids]
    if align:
        R, t = umeyama(e_pos, g_pos)
        e_pos = e_pos @ R.T + t
        e_quat = quat_mul(rotmat_to_quat(R), e_quat)
    ate = float(np.sqrt(np.mean(np.sum((e_pos - g_pos) ** 2, axis=1))))
    rpe_t, rpe_r = relative_pose_error(e_pos, e_quat, g_pos, g_quat)
    metrics = Metrics(ate, rpe_t, rpe_r, int(est_ids.shape[0]), align)
    logger.info("Evaluation: ATE %.4f m, RPE_t %.5f m/m, RPE_r %.5f deg/m over %d poses", ate, rpe_t, rpe_r, metrics.pairs)
    return metrics


def orientation_errors(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> np.ndarray:
    """Per associated pose rotation error in radians, without alignment."""
    est_ids, gt_ids = associate(est, gt)
    rel = quat_mul(quat_conj(gt.quats[gt_ids]), est.quats[est_ids])
    return np.linalg.norm(quat_log(rel), axis=-1)
