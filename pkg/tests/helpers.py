# tests/helpers.py
from __future__ import annotations

from typing import Callable

import numpy as np

from app.core.config import PipelineConfig
from app.core.geometry import quat_exp
from app.core.spline import SplineWindow
from app.models.domain import STATE_DIM, FilterState, ImuData, RadarScan


def random_spd(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T / dim + 0.1 * np.eye(dim))


def make_window(rng: np.random.Generator, increment_scale: float = 0.3, t0: float = 0.0, dt: float = 0.1) -> SplineWindow:
    return SplineWindow(
        knot_times=t0 + dt * np.arange(4),
        control_points=rng.normal(scale=2.0, size=(4, 3)),
        increments=rng.normal(scale=increment_scale, size=(4, 3)),
        lag_quat=quat_exp(rng.normal(scale=1.0, size=3)),
    )


def make_state(rng: np.random.Generator, increment_scale: float = 0.3, dt: float = 0.1) -> FilterState:
    window = make_window(rng, increment_scale, dt=dt)
    x = np.concatenate(
        [
            window.control_points.reshape(-1),
            window.increments.reshape(-1),
            rng.normal(scale=0.05, size=3),
            rng.normal(scale=0.01, size=3),
        ]
    )
    return FilterState(x, random_spd(rng, STATE_DIM, 1e-3), window.lag_quat, random_spd(rng, 3, 1e-4), 3, window.knot_times)


def window_time(window: SplineWindow, u: float) -> float:
    return window.start + u * window.dt


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of fn at x; rows follow fn's output."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fn(x))
    jac = np.zeros((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        dx = np.zeros_like(x)
        dx[i] = step
        jac[:, i] = (np.atleast_1d(fn(x + dx)) - np.atleast_1d(fn(x - dx))) / (2.0 * step)
    return jac


def with_x(state: FilterState, x: np.ndarray) -> FilterState:
    out = state.copy()
    out.x = np.asarray(x, dtype=float).copy()
    return out


def drop_interval(scenario, start: float, end: float) -> tuple[list[RadarScan], ImuData]:
    """Scenario streams with every radar frame and IMU sample in [start, end) removed."""
    scans = [s for s in scenario.scans if not (start <= s.stamp < end)]
    imu = scenario.imu
    keep = (imu.times < start) | (imu.times >= end)
    return scans, ImuData(imu.times[keep], imu.gyro[keep], imu.accel[keep])


def noiseless_config(**overrides) -> PipelineConfig:
    """Pipeline whose sensor and process noise match noiseless synthetic streams."""
    values = {
        "sigma_range": 1e-4,
        "sigma_azimuth_deg": 1e-4,
        "sigma_elevation_deg": 1e-4,
        "sigma_doppler": 1e-4,
        "sigma_gyro": 1e-5,
        "sigma_gravity": 1e-5,
        "fallback_point_sigma": 1e-4,
        "process_sigma_translation": 1e-4,
        "process_sigma_rotation": 1e-5,
        "init_sigma_translation": 1e-4,
        "init_sigma_rotation": 1e-5,
    }
    values.update(overrides)
    return PipelineConfig(**values)
