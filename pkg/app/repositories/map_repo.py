# app/repositories/map_repo.py
"""
World-frame radar map with per-point covariance.

Storage is columnar. A KDTree covers the points present at the last rebuild;
points inserted since then sit in a pending buffer that is searched brute
force, and deletions are lazy (an ``alive`` mask). The tree is rebuilt when
too many of its points are dead or too many points are pending.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import KDTree

from app.models.domain import InsertReport, KnnResult, MapPoint

logger = logging.getLogger(__name__)


def _ordered(ids: np.ndarray, dists: np.ndarray, stamps: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, stamps[ids], dists))[:k]
    return ids[order], dists[order]


def _tie_radius(kth: float | np.ndarray) -> float | np.ndarray:
    """Search radius that keeps every point tied with the k-th distance."""
    return kth * (1.0 + 1e-9) + 1e-12


@dataclass(frozen=True)
class MapArrays:
    positions: np.ndarray
    covariances: np.ndarray
    rcs: np.ndarray
    stamps: np.ndarray

    @property
    def traces(self) -> np.ndarray:
        return np.trace(self.covariances, axis1=1, axis2=2)

    def __len__(self) -> int:
        return int(self.positions.shape[0])


class MapSnapshot:
    """Frozen copy of the live map points; later map edits do not reach it."""

    def __init__(self, arrays: MapArrays, version: int = 0) -> None:
        self.arrays = arrays
        self.version = version
        self.traces = arrays.traces
        self._tree = KDTree(arrays.positions) if len(arrays) else None

    def __len__(self) -> int:
        return len(self.arrays)

    def point(self, i: int) -> MapPoint:
        a = self.arrays
        return MapPoint(a.positions[i], a.covariances[i], float(a.rcs[i]), float(a.stamps[i]))

    def knn_ids(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(ids, distances), each (Q, k); missing slots hold -1 / inf."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        ids = np.full((queries.shape[0], k), -1, dtype=int)
        dists = np.full((queries.shape[0], k), np.inf)
        n = len(self)
        if n == 0 or queries.shape[0] == 0:
            return ids, dists
        kq = min(n, k + 2)
        _, raw = self._tree.query(queries, k=kq)
        raw = np.asarray(raw).reshape(queries.shape[0], kq)
        positions = self.arrays.positions
        exact = np.linalg.norm(positions[raw] - queries[:, None, :], axis=2)
        balls = None
        if kq < n:
            # the tree returns an arbitrary subset of a tie at the k-th distance
            balls = self._tree.query_ball_point(queries, _tie_radius(np.sort(exact, axis=1)[:, k - 1]))
        for row in range(queries.shape[0]):
            cand, d_row = raw[row], exact[row]
            if balls is not None and len(balls[row]) > kq:
                cand = np.asarray(sorted(balls[row]), dtype=int)
                d_row = np.linalg.norm(positions[cand] - queries[row], axis=1)
            sel, d = _ordered(cand, d_row, self.arrays.stamps, k)
            ids[row, : sel.shape[0]] = sel
            dists[row, : d.shape[0]] = d
        return ids, dists

    def knn(self, query: np.ndarray, k: int) -> KnnResult:
        ids, dists = self.knn_ids(np.asarray(query, dtype=float)[None, :], k)
        valid = ids[0] >= 0
        return KnnResult([self.point(int(i)) for i in ids[0][valid]], dists[0][valid], bool(np.count_nonzero(valid) < k))


class SpatialIndex:
    def __init__(self, rebuild_deleted_fraction: float = 0.5, rebuild_pending_fraction: float = 0.3) -> None:
        self.rebuild_deleted_fraction = rebuild_deleted_fraction
        self.rebuild_pending_fraction = rebuild_pending_fraction
        self._size = 0
        self._allocate(64)
        self._tree: Optional[KDTree] = None
        self._tree_ids = np.zeros(0, dtype=int)
        self._pending: list[int] = []
        self.version = 0
        self.rebuilds = 0

    def _allocate(self, capacity: int) -> None:
        n = self._size
        old = getattr(self, "_positions", None)
        positions = np.zeros((capacity, 3))
        covariances = np.zeros((capacity, 3, 3))
        traces = np.zeros(capacity)
        rcs = np.zeros(capacity)
        stamps = np.zeros(capacity)
        alive = np.zeros(capacity, dtype=bool)
        if old is not None and n:
            positions[:n] = self._positions[:n]
            covariances[:n] = self._covariances[:n]
            traces[:n] = self._traces[:n]
            rcs[:n] = self._rcs[:n]
            stamps[:n] = self._stamps[:n]
            alive[:n] = self._alive[:n]
        self._positions, self._covariances, self._traces = positions, covariances, traces
        self._rcs, self._stamps, self._alive = rcs, stamps, alive

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: self._size]

    @property
    def covariances(self) -> np.ndarray:
        return self._covariances[: self._size]

    @property
    def traces(self) -> np.ndarray:
        return self._traces[: self._size]

    @property
    def rcs(self) -> np.ndarray:
        return self._rcs[: self._size]

    @property
    def stamps(self) -> np.ndarray:
        return self._stamps[: self._size]

    @property
    def alive(self) -> np.ndarray:
        return self._alive[: self._size]

    def __len__(self) -> int:
        return int(np.count_nonzero(self.alive))

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def add(self, position: np.ndarray, covariance: np.ndarray, rcs: float, stamp: float) -> int:
        if self._size == self._positions.shape[0]:
            self._allocate(2 * self._positions.shape[0])
        idx = self._size
        cov = np.asarray(covariance, dtype=float).reshape(3, 3)
        self._positions[idx] = np.asarray(position, dtype=float).reshape(3)
        self._covariances[idx] = cov
        self._traces[idx] = np.trace(cov)
        self._rcs[idx] = rcs
        self._stamps[idx] = stamp
        self._alive[idx] = True
        self._size += 1
        self._pending.append(idx)
        self.version += 1
        return idx

    def delete(self, ids: Sequence[int]) -> None:
        ids = [int(i) for i in ids if self.alive[int(i)]]
        if not ids:
            return
        self.alive[ids] = False
        dead = set(ids)
        self._pending = [i for i in self._pending if i not in dead]
        self.version += 1

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        query = np.asarray(query, dtype=float)
        found: list[int] = []
        if self._tree is not None:
            hits = self._tree.query_ball_point(query, r)
            found.extend(int(self._tree_ids[h]) for h in hits)
        if self._pending:
            pend = np.asarray(self._pending, dtype=int)
            near = np.linalg.norm(self.positions[pend] - query, axis=1) <= r
            found.extend(pend[near].tolist())
        ids = np.asarray(sorted(set(found)), dtype=int)
        return ids[self.alive[ids]] if ids.size else ids

    def knn(self, query: np.ndarray, k: int) -> KnnResult:
        query = np.asarray(query, dtype=float)
        n_alive = len(self)
        if n_alive == 0:
            return KnnResult([], np.zeros(0), True)
        cand: list[int] = list(self._pending)
        if self._tree is not None:
            built = self._tree_ids.shape[0]
            kq = min(built, k + 2)
            while True:
                _, hits = self._tree.query(query, k=kq)
                hits = np.atleast_1d(hits)
                live = [int(self._tree_ids[h]) for h in hits if self.alive[self._tree_ids[h]]]
                if len(live) >= k or kq >= built:
                    break
                kq = min(built, 2 * kq)
            cand.extend(live)
        ids = np.asarray(sorted(set(cand)), dtype=int)
        dists = np.linalg.norm(self.positions[ids] - query, axis=1)
        if ids.shape[0] >= k:
            ids = np.union1d(ids, self.radius(query, _tie_radius(float(np.sort(dists)[k - 1]))))
            dists = np.linalg.norm(self.positions[ids] - query, axis=1)
        ids, dists = _ordered(ids, dists, self.stamps, k)
        points = [self.point(int(i)) for i in ids]
        return KnnResult(points, dists, bool(ids.shape[0] < k))

    def point(self, i: int) -> MapPoint:
        return MapPoint(self.positions[i], self.covariances[i], float(self.rcs[i]), float(self.stamps[i]))

    def needs_rebuild(self) -> bool:
        built = self._tree_ids.shape[0]
        dead_built = built - int(np.count_nonzero(self.alive[self._tree_ids])) if built else 0
        if built and dead_built / built > self.rebuild_deleted_fraction:
            return True
        n_alive = len(self)
        return bool(n_alive and len(self._pending) / n_alive > self.rebuild_pending_fraction)

    def rebuild(self) -> None:
        """Compact storage to live points and rebuild the tree over all of them."""
        keep = self.alive_ids()
        n = keep.shape[0]
        self._positions[:n] = self._positions[keep]
        self._covariances[:n] = self._covariances[keep]
        self._traces[:n] = self._traces[keep]
        self._rcs[:n] = self._rcs[keep]
        self._stamps[:n] = self._stamps[keep]
        self._alive[:n] = True
        self._alive[n:] = False
        self._size = n
        self._tree_ids = np.arange(n)
        self._tree = KDTree(self.positions.copy()) if keep.shape[0] else None
        self._pending = []
        self.rebuilds += 1
        self.version += 1
        logger.debug("Map index rebuilt over %d points", keep.shape[0])

    def maybe_rebuild(self) -> bool:
        if self.needs_rebuild():
            self.rebuild()
            return True
        return False

    def arrays(self) -> MapArrays:
        ids = self.alive_ids()
        return MapArrays(
            self.positions[ids].copy(),
            self.covariances[ids].copy(),
            self.rcs[ids].copy(),
            self.stamps[ids].copy(),
        )


class MapRepository:
    """The submap: uncertainty-gated insertion, radius-scoped replacement, snapshots, pruning."""

    def __init__(
        self,
        tau_u: float = 0.5,
        r_replace: float = 0.2,
        window: float = 200.0,
        rebuild_deleted_fraction: float = 0.5,
        rebuild_pending_fraction: float = 0.3,
    ) -> None:
        self.tau_u = tau_u
        self.r_replace = r_replace
        self.window = window
        self.index = SpatialIndex(rebuild_deleted_fraction, rebuild_pending_fraction)
        self._snapshot: Optional[MapSnapshot] = None

    def __len__(self) -> int:
        return len(self.index)

    def knn(self, query: np.ndarray, k: int) -> KnnResult:
        return self.index.knn(query, k)

    def insert_with_replacement(self, candidates: Sequence[MapPoint]) -> InsertReport:
        report = InsertReport()
        for cand in candidates:
            if cand.trace > self.tau_u:
                report.rejected += 1
                continue
            near = self.index.radius(cand.position, self.r_replace)
            if near.size:
                traces = self.index.traces[near]
                worse = near[traces > cand.trace]
                if worse.size:
                    self.index.delete(worse)
                    report.replaced += int(worse.size)
                if np.any(traces < cand.trace):
                    report.dropped += 1
                    continue
            self.index.add(cand.position, cand.covariance, cand.rcs, cand.stamp)
            report.inserted += 1
        self.index.maybe_rebuild()
        return report

    def prune(self, center: np.ndarray) -> int:
        """Delete points farther than ``window`` from ``center``."""
        ids = self.index.alive_ids()
        if not ids.size:
            return 0
        far = ids[np.linalg.norm(self.index.positions[ids] - np.asarray(center), axis=1) > self.window]
        if far.size:
            self.index.delete(far)
            self.index.maybe_rebuild()
        return int(far.size)

    def snapshot(self) -> MapSnapshot:
        if self._snapshot is None or self._snapshot.version != self.index.version:
            self._snapshot = MapSnapshot(self.index.arrays(), self.index.version)
        return self._snapshot

    def arrays(self) -> MapArrays:
        return self.index.arrays()

    def load(self, arrays: MapArrays) -> None:
        for i in range(len(arrays)):
            self.index.add(arrays.positions[i], arrays.covariances[i], float(arrays.rcs[i]), float(arrays.stamps[i]))
        self.index.rebuild()
