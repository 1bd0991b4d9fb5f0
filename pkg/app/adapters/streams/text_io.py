# app/adapters/streams/text_io.py
"""
Stream and result file formats.
- read_radar / write_radar: one CSV per sequence, one row per return, grouped by scan_id.
- read_imu / write_imu: CSV, one row per sample.
- read_trajectory / write_trajectory: "timestamp tx ty tz qx qy qz qw", space separated.
- write_map_text / write_map_ply: map export (x y z trace rcs) as text or binary PLY.
- write_diagnostics: per-knot records as JSON lines.
- save_checkpoint / load_checkpoint: npz archive of the filter and map for resumable runs.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from app.core.errors import FormatParseError, StreamOrderError
from app.models.domain import FilterState, ImuData, RadarScan, TrajectoryEstimate
from app.repositories.map_repo import MapArrays

logger = logging.getLogger(__name__)

RADAR_HEADER = ["scan_id", "point_time_s", "range_m", "azimuth_rad", "elevation_rad", "doppler_mps", "rcs_dbsm"]
IMU_HEADER = ["time_s", "wx", "wy", "wz", "ax", "ay", "az"]
FLOAT_FORMAT = "%.17g"

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("trace", "<f4"), ("rcs", "<f4")])


def _fmt(value: float) -> str:
    return FLOAT_FORMAT % value


def _float_row(row: Sequence[str], expected: int, path: str, line: int) -> list[float]:
    if len(row) != expected:
        raise FormatParseError(f"expected {expected} columns, got {len(row)}", path=path, line=line)
    try:
        values = [float(v) for v in row]
    except ValueError as e:
        raise FormatParseError(f"non-numeric value ({e})", path=path, line=line) from e
    if not all(np.isfinite(values)):
        raise FormatParseError("non-finite value", path=path, line=line)
    return values


def _data_rows(path: Path, header: list[str]) -> Iterable[tuple[int, list[str]]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            line = reader.line_num
            if not row or (row[0].strip().startswith("#")):
                continue
            cells = [c.strip() for c in row]
            if cells == header:
                continue
            yield line, cells


# ---- Radar ----
def write_radar(path: str | Path, scans: Sequence[RadarScan]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RADAR_HEADER)
        for scan in scans:
            for i in range(len(scan)):
                writer.writerow(
                    [
                        scan.scan_id,
                        _fmt(scan.times[i]),
                        _fmt(scan.ranges[i]),
                        _fmt(scan.azimuths[i]),
                        _fmt(scan.elevations[i]),
                        _fmt(scan.dopplers[i]),
                        _fmt(scan.rcs[i]),
                    ]
                )
    return path


def read_radar(path: str | Path) -> list[RadarScan]:
    """Rows of one scan must be contiguous; scan ids and point times never decrease."""
    path = Path(path)
    name = str(path)
    groups: list[tuple[int, list[list[float]]]] = []
    last_time = -np.inf
    for line, row in _data_rows(path, RADAR_HEADER):
        values = _float_row(row, len(RADAR_HEADER), name, line)
        scan_id = int(values[0])
        if values[0] != scan_id:
            raise FormatParseError(f"scan_id must be an integer, got {row[0]!r}", path=name, line=line)
        if values[1] < last_time:
            raise StreamOrderError(f"point time {values[1]!r} precedes {last_time!r}", path=name, line=line)
        if values[2] <= 0.0:
            raise FormatParseError(f"range must be positive, got {values[2]!r}", path=name, line=line)
        last_time = values[1]
        if groups and groups[-1][0] == scan_id:
            groups[-1][1].append(values[1:])
            continue
        if groups and scan_id < groups[-1][0]:
            raise StreamOrderError(f"scan_id {scan_id} after {groups[-1][0]}", path=name, line=line)
        groups.append((scan_id, [values[1:]]))

    scans = []
    for scan_id, rows in groups:
        cols = np.asarray(rows)
        scans.append(RadarScan(float(cols[:, 0].min()), cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], cols[:, 4], cols[:, 5], scan_id=scan_id))
    logger.info("Read %d radar scans from %s", len(scans), name)
    return scans


# ---- IMU ----
def write_imu(path: str | Path, imu: ImuData) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IMU_HEADER)
        for t, w, a in zip(imu.times, imu.gyro, imu.accel):
            writer.writerow([_fmt(t), *map(_fmt, w), *map(_fmt, a)])
    return path


def read_imu(path: str | Path) -> ImuData:
    path = Path(path)
    name = str(path)
    rows: list[list[float]] = []
    for line, row in _data_rows(path, IMU_HEADER):
        values = _float_row(row, len(IMU_HEADER), name, line)
        if rows and values[0] <= rows[-1][0]:
            raise StreamOrderError(f"IMU time {values[0]!r} not after {rows[-1][0]!r}", path=name, line=line)
        rows.append(values)
    cols = np.asarray(rows).reshape(-1, 7)
    logger.info("Read %d IMU samples from %s", cols.shape[0], name)
    return ImuData(cols[:, 0], cols[:, 1:4], cols[:, 4:7])


# ---- Trajectory ----
def write_trajectory(path: str | Path, traj: TrajectoryEstimate) -> Path:
    """Quaternions are stored x y z w after the translation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t, p, q in zip(traj.times, traj.positions, traj.quats):
            values = [t, *p, q[1], q[2], q[3], q[0]]
            fh.write(" ".join(_fmt(v) for v in values) + "\n")
    return path


def read_trajectory(path: str | Path) -> TrajectoryEstimate:
    path = Path(path)
    name = str(path)
    rows: list[list[float]] = []
    with path.open("r", encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text.startswith("#"):
                continue
            values = _float_row(text.replace(",", " ").split(), 8, name, line)
            if rows and values[0] <= rows[-1][0]:
                raise StreamOrderError(f"timestamp {values[0]!r} not after {rows[-1][0]!r}", path=name, line=line)
            rows.append(values)
    cols = np.asarray(rows).reshape(-1, 8)
    quats = np.column_stack([cols[:, 7], cols[:, 4:7]])
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms <= 0.0):
        raise FormatParseError("zero quaternion in trajectory", path=name)
    return TrajectoryEstimate(cols[:, 0], cols[:, 1:4], quats / norms[:, None])


# ---- Map ----
def write_map_text(path: str | Path, arrays: MapArrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# x y z trace rcs\n")
        for p, tr, rcs in zip(arrays.positions, arrays.traces, arrays.rcs):
            fh.write(" ".join(_fmt(v) for v in (*p, tr, rcs)) + "\n")
    return path


def read_map_text(path: str | Path) -> np.ndarray:
    """(N, 5) rows of x y z trace rcs."""
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text.startswith("#"):
                continue
            rows.append(_float_row(text.split(), 5, str(path), line))
    return np.asarray(rows).reshape(-1, 5)


def write_map_ply(path: str | Path, arrays: MapArrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.zeros(len(arrays), dtype=PLY_DTYPE)
    if len(arrays):
        data["x"], data["y"], data["z"] = arrays.positions.T
        data["trace"] = arrays.traces
        data["rcs"] = arrays.rcs
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(arrays)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float trace\nproperty float rcs\n"
        "end_header\n"
    )
    with path.open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_map_ply(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatParseError("not a PLY file", path=str(path))
    count = None
    for line in raw[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    if count is None:
        raise FormatParseError("PLY header has no vertex element", path=str(path))
    body = raw[end + len(marker) :]
    if len(body) != count * PLY_DTYPE.itemsize:
        raise FormatParseError(f"PLY body holds {len(body)} bytes, expected {count * PLY_DTYPE.itemsize}", path=str(path))
    data = np.frombuffer(body, dtype=PLY_DTYPE)
    return np.column_stack([data[name].astype(float) for name in PLY_DTYPE.names])


# ---- Diagnostics ----
def write_diagnostics(path: str | Path, records: Iterable[dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_diagnostics(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                records.append(json.loads(text))
            except json.JSONDecodeError as e:
                raise FormatParseError(f"invalid JSON ({e.msg})", path=str(path), line=line) from e
    return records


# ---- Checkpoint ----
@dataclass
class Checkpoint:
    """Everything a resumed run needs: filter state, map, the trajectory so far and the gravity estimate."""

    state: FilterState
    map_arrays: MapArrays
    trajectory: TrajectoryEstimate
    gravity: np.ndarray
    ego_velocity: Optional[np.ndarray] = None
    meta: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = ckpt.state
    m = ckpt.map_arrays
    with path.open("wb") as fh:
        np.savez(
            fh,
            x=s.x,
            P=s.P,
            lag_quat=s.lag_quat,
            lag_cov=s.lag_cov,
            knot_index=np.array(s.knot_index),
            knot_times=s.knot_times,
            map_positions=m.positions,
            map_covariances=m.covariances,
            map_rcs=m.rcs,
            map_stamps=m.stamps,
            traj_times=ckpt.trajectory.times,
            traj_positions=ckpt.trajectory.positions,
            traj_quats=ckpt.trajectory.quats,
            gravity=ckpt.gravity,
            ego_velocity=np.zeros(0) if ckpt.ego_velocity is None else ckpt.ego_velocity,
            meta=np.array(json.dumps(ckpt.meta, sort_keys=True)),
        )
    logger.info("Checkpoint written to %s (knot %d)", path, s.knot_index)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            state = FilterState(
                data["x"].copy(),
                data["P"].copy(),
                data["lag_quat"].copy(),
                data["lag_cov"].copy(),
                int(data["knot_index"]),
                data["knot_times"].copy(),
            )
            arrays = MapArrays(
                data["map_positions"].reshape(-1, 3).copy(),
                data["map_covariances"].reshape(-1, 3, 3).copy(),
                data["map_rcs"].copy(),
                data["map_stamps"].copy(),
            )
            traj = TrajectoryEstimate(data["traj_times"], data["traj_positions"], data["traj_quats"])
            ego = data["ego_velocity"]
            return Checkpoint(
                state,
                arrays,
                traj,
                data["gravity"].copy(),
                ego.copy() if ego.size else None,
                json.loads(str(data["meta"])),
            )
    except (KeyError, ValueError, OSError) as e:
        raise FormatParseError(f"unreadable checkpoint ({e})", path=str(path)) from e
