# app/services/localizability_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.geometry import canonical_sign
from app.models.domain import ConstraintMatrix, LocalizabilityHessian

logger = logging.getLogger(__name__)

AXIS_NAMES = ("t0", "t1", "t2", "r0", "r1", "r2")


@dataclass(frozen=True)
class Eigenbasis:
    translation_values: np.ndarray
    translation_vectors: np.ndarray
    rotation_values: np.ndarray
    rotation_vectors: np.ndarray


def _rows(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    return np.hstack([normals, np.cross(points, normals)])


def accumulate(points: np.ndarray, normals: np.ndarray) -> LocalizabilityHessian:
    """Lambda = sum L^T L with L = [n, p x n]; ``points`` are sensor-centred."""
    rows = _rows(points, normals)
    if rows.shape[0] == 0:
        return LocalizabilityHessian(np.zeros((6, 6)))
    return LocalizabilityHessian(rows.T @ rows)


def _sorted_eigen(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values, vectors = np.linalg.eigh(0.5 * (block + block.T))
    vectors = np.column_stack([canonical_sign(vectors[:, i]) for i in range(3)])
    return values, vectors


def eigenbasis(hessian: LocalizabilityHessian) -> Eigenbasis:
    t_vals, t_vecs = _sorted_eigen(hessian.translation_block)
    r_vals, r_vecs = _sorted_eigen(hessian.rotation_block)
    return Eigenbasis(t_vals, t_vecs, r_vals, r_vecs)


def score_points(hessian: LocalizabilityHessian, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Per-point 6-vector [n^T E_t, (p x n / |p x n|)^T E_r]."""
    basis = eigenbasis(hessian)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    moments = np.cross(points, normals)
    norms = np.linalg.norm(moments, axis=1)
    usable = norms >= 1e-12
    unit_moments = np.zeros_like(moments)
    unit_moments[usable] = moments[usable] / norms[usable, None]
    return np.hstack([normals @ basis.translation_vectors, unit_moments @ basis.rotation_vectors])


def build_constraints(hessian: LocalizabilityHessian, scores: np.ndarray, eta: float, n_min: int) -> ConstraintMatrix:
    basis = eigenbasis(hessian)
    scores = np.asarray(scores, dtype=float).reshape(-1, 6)
    counts = np.count_nonzero(np.abs(scores) > eta, axis=0)
    rows: list[np.ndarray] = []
    axes: list[str] = []
    for axis in range(6):
        if counts[axis] >= n_min:
            continue
        row = np.zeros(6)
        if axis < 3:
            row[:3] = basis.translation_vectors[:, axis]
        else:
            row[3:] = basis.rotation_vectors[:, axis - 3]
        rows.append(row)
        axes.append(AXIS_NAMES[axis])
    eigenvalues = np.concatenate([basis.translation_values, basis.rotation_values])
    if not rows:
        return ConstraintMatrix(np.zeros((0, 6)), np.zeros((6, 0)), (), eigenvalues, counts)
    C = np.vstack(rows)
    upsilon = C.T @ np.linalg.inv(C @ C.T)
    return ConstraintMatrix(C, upsilon, tuple(axes), eigenvalues, counts)


def project_increment(delta: np.ndarray, constraints: ConstraintMatrix) -> np.ndarray:
    """(I - Upsilon C) delta: removes the components along the constrained directions."""
    delta = np.asarray(delta, dtype=float)
    if constraints.dim == 0:
        return delta.copy()
    return delta - constraints.upsilon @ (constraints.C @ delta)


class LocalizabilityService:
    def __init__(self, eta: float = 0.8, min_points: int = 30, enabled: bool = True) -> None:
        self.eta = eta
        self.min_points = min_points
        self.enabled = enabled

    def analyze(self, points: np.ndarray, normals: np.ndarray) -> ConstraintMatrix:
        if not self.enabled:
            return ConstraintMatrix.empty()
        hessian = accumulate(points, normals)
        scores = score_points(hessian, points, normals)
        constraints = build_constraints(hessian, scores, self.eta, self.min_points)
        if constraints.dim:
            logger.debug(
                "Under-constrained axes %s (informative counts %s)",
                ",".join(constraints.axes),
                constraints.informative_counts.tolist(),
            )
        return constraints
