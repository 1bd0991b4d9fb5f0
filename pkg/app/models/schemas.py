# app/models/schemas.py
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class ScenarioSpec(BaseModel):
    """Synthetic sequence description. Noise sigmas are per sample; angles in degrees where named."""

    model_config = ConfigDict(extra="forbid")

    scenario: Literal["figure_eight", "tunnel", "stationary"] = "figure_eight"
    duration: float = Field(60.0, gt=1.0, le=3600.0)
    seed: int = Field(0, ge=0)
    radar_rate: float = Field(10.0, gt=0.0, le=100.0)
    imu_rate: float = Field(100.0, gt=0.0, le=2000.0)
    points_per_frame: int = Field(200, ge=10, le=5000)
    knot_interval: float = Field(0.1, gt=0.0, le=1.0)
    scan_spread: float = Field(0.0, ge=0.0, le=0.1)

    rest_duration: float = Field(1.0, ge=0.5)
    ramp_duration: float = Field(2.0, gt=0.0)
    amplitude_x: float = Field(15.0, gt=0.0)
    amplitude_y: float = Field(8.0, gt=0.0)
    period: float = Field(30.0, gt=1.0)
    tunnel_speed: float = Field(5.0, gt=0.0)

    sigma_range: float = Field(0.05, ge=0.0)
    sigma_azimuth_deg: float = Field(0.5, ge=0.0)
    sigma_elevation_deg: float = Field(0.5, ge=0.0)
    sigma_doppler: float = Field(0.05, ge=0.0)
    sigma_rcs: float = Field(1.0, ge=0.0)
    gyro_noise: float = Field(0.002, ge=0.0)
    accel_noise: float = Field(0.02, ge=0.0)
    gyro_bias_walk: float = Field(1e-5, ge=0.0)
    accel_bias_walk: float = Field(1e-4, ge=0.0)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gravity_magnitude: float = Field(9.81, gt=0.0)

    fov_azimuth_deg: float = Field(60.0, gt=0.0, le=180.0)
    fov_elevation_deg: float = Field(15.0, gt=0.0, lt=90.0)
    max_range: float = Field(80.0, gt=1.0)
    min_range: float = Field(1.0, ge=0.0)
    scatterer_fraction: float = Field(0.25, ge=0.0, le=1.0)
    scatterer_count: int = Field(80, ge=0)
    dynamic_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    ghost_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    doppler_sign: Literal[-1, 1] = -1

    def noiseless(self) -> "ScenarioSpec":
        zero = {
            name: 0.0
            for name in (
                "sigma_range",
                "sigma_azimuth_deg",
                "sigma_elevation_deg",
                "sigma_doppler",
                "sigma_rcs",
                "gyro_noise",
                "accel_noise",
                "gyro_bias_walk",
                "accel_bias_walk",
            )
        }
        return self.model_copy(update=zero)


class ArtifactLink(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    url: str


class ConfigValidateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict[str, Any] = Field(default_factory=dict)


class ConfigValidateResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    valid: bool
    errors: Optional[str] = None
    config: Optional[dict[str, Any]] = None


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spec: ScenarioSpec = Field(default_factory=ScenarioSpec)


class SimulateResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    status: str = "success"
    frames: int
    radar_points: int
    imu_samples: int
    files: list[ArtifactLink]


class OdometryRunRequest(BaseModel):
    """Either name previously generated radar/IMU artifacts or give a scenario to simulate first."""

    model_config = ConfigDict(extra="forbid")

    radar_artifact: Optional[str] = None
    imu_artifact: Optional[str] = None
    scenario: Optional[ScenarioSpec] = None
    config: dict[str, Any] = Field(default_factory=dict)


class MetricsResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ate: float
    rpe_t: float
    rpe_r: float
    pairs: int
    aligned: bool


class OdometryRunResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    status: str = "success"
    knots: int
    poses: int
    map_points: int
    runtime_s: float
    metrics: Optional[MetricsResponse] = None
    files: list[ArtifactLink]


class EvaluateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    estimate_artifact: str
    ground_truth_artifact: str
    align: bool = True
