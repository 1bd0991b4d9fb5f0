# app/services/preprocess_service.py
from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from app.models.domain import EgoVelocity, RadarScan

logger = logging.getLogger(__name__)

STATIC_DOPPLER = 0.05
MIN_SAMPLE = 3
MAX_CONDITION = 1.0e3


def _solve_lsq(H: np.ndarray, y: np.ndarray) -> Optional[np.ndarray]:
    """Least-squares v for H v = y; None when the normal matrix is ill-conditioned."""
    HtH = H.T @ H
    singular = np.linalg.svd(HtH, compute_uv=False)
    if singular[-1] <= 0.0 or singular[0] / singular[-1] > MAX_CONDITION:
        return None
    v, *_ = np.linalg.lstsq(H, y, rcond=None)
    return v


def estimate_ego_velocity(
    scan: RadarScan,
    *,
    sign: float = -1.0,
    iterations: int = 100,
    threshold: float = 0.25,
    min_inliers: int = 10,
    seed: int = 0,
) -> EgoVelocity:
    """RANSAC fit of doppler_i = sign * d_i^T v over 3-point samples, refined on the consensus set."""
    n = len(scan)
    if n < max(MIN_SAMPLE, min_inliers):
        return EgoVelocity.invalid()
    H = sign * scan.directions()
    y = scan.dopplers

    abs_doppler = np.abs(y)
    quantile = int(n * 0.75)
    if np.partition(abs_doppler, quantile)[quantile] < STATIC_DOPPLER:
        inliers = int(np.count_nonzero(abs_doppler < STATIC_DOPPLER))
        return EgoVelocity(np.zeros(3), inliers, inliers >= min_inliers)

    rng = np.random.default_rng(seed)
    best = np.zeros(0, dtype=int)
    for _ in range(iterations):
        sample = rng.choice(n, size=MIN_SAMPLE, replace=False)
        v = _solve_lsq(H[sample], y[sample])
        if v is None:
            continue
        inliers = np.flatnonzero(np.abs(y - H @ v) < threshold)
        if inliers.shape[0] > best.shape[0]:
            best = inliers
    if best.shape[0] < MIN_SAMPLE:
        return EgoVelocity.invalid()
    v = _solve_lsq(H[best], y[best])
    if v is None:
        return EgoVelocity(np.zeros(3), int(best.shape[0]), False)
    consensus = np.flatnonzero(np.abs(y - H @ v) < threshold)
    if consensus.shape[0] > best.shape[0]:
        refined = _solve_lsq(H[consensus], y[consensus])
        if refined is not None:
            v, best = refined, consensus
    count = int(best.shape[0])
    return EgoVelocity(v, count, count >= min_inliers)


def filter_dynamic(scan: RadarScan, ego: EgoVelocity, gate: float, *, sign: float = -1.0) -> RadarScan:
    """Keep returns whose Doppler agrees with the static-world prediction within ``gate``."""
    if not ego.valid:
        logger.warning("Ego velocity invalid for scan %d; dynamic filtering skipped", scan.scan_id)
        return scan
    predicted = sign * (scan.directions() @ ego.velocity)
    return scan.select(np.abs(scan.dopplers - predicted) <= gate)


def stabilize_ego(current: EgoVelocity, previous: Optional[EgoVelocity], jump: float) -> EgoVelocity:
    """Current estimate, or the previous one (flagged reused) on an invalid estimate or an abrupt jump.

    With no valid previous estimate to fall back on, an invalid current
    estimate comes back invalid and flagged.
    """
    if previous is None or not previous.valid:
        if not current.valid:
            return EgoVelocity(current.velocity.copy(), current.inliers, False, reused=True)
        return current
    if not current.valid or np.linalg.norm(current.velocity - previous.velocity) > jump:
        return EgoVelocity(previous.velocity.copy(), previous.inliers, True, reused=True)
    return current


class PreprocessService:
    """Per-scan range gating, ego-velocity estimation, stabilization and dynamic-point removal."""

    def __init__(
        self,
        *,
        min_range: float = 0.5,
        sign: float = -1.0,
        iterations: int = 100,
        threshold: float = 0.25,
        min_inliers: int = 10,
        seed: int = 0,
        gate: float = 0.5,
        jump: float = 2.0,
    ) -> None:
        self.min_range = min_range
        self.sign = sign
        self.iterations = iterations
        self.threshold = threshold
        self.min_inliers = min_inliers
        self.seed = seed
        self.gate = gate
        self.jump = jump
        self.previous: Optional[EgoVelocity] = None

    def process(self, scan: RadarScan) -> tuple[RadarScan, EgoVelocity]:
        scan = scan.select(scan.ranges > self.min_range)
        ego = estimate_ego_velocity(
            scan,
            sign=self.sign,
            iterations=self.iterations,
            threshold=self.threshold,
            min_inliers=self.min_inliers,
            seed=self.seed + scan.scan_id,
        )
        stable = stabilize_ego(ego, self.previous, self.jump)
        if stable.reused and stable.valid:
            logger.info("Scan %d: reusing previous ego velocity", scan.scan_id)
        elif stable.reused:
            logger.warning("Scan %d: ego velocity invalid with no valid estimate to reuse", scan.scan_id)
        if stable.valid:
            self.previous = stable
        return filter_dynamic(scan, stable, self.gate, sign=self.sign), stable
