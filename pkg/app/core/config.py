# app/core/config.py
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.core.errors import ConfigError

load_dotenv()


class Settings(BaseModel):
    log_level: str = os.getenv("RIO_LOG_LEVEL", "INFO").upper()
    output_dir: str = os.getenv("RIO_OUTPUT_DIR", "outputs")
    artifact_ttl_hours: float = float(os.getenv("RIO_ARTIFACT_TTL_HOURS", "24"))
    public_base_url: str = os.getenv("PUBLIC_BASE_URL", "")
    config_path: Optional[str] = os.getenv("RIO_CONFIG_PATH") or None

    # CORS settings
    cors_origins: str = os.getenv("CORS_ORIGINS", "*")
    cors_allow_credentials: bool = os.getenv("CORS_ALLOW_CREDENTIALS", "true").lower() == "true"


settings = Settings()


UncertaintyMode = Literal["full", "measurement", "none"]


class PipelineConfig(BaseModel):
    """Every tunable of the odometry engine. Angles are radians unless the name says deg."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # spline / IEKF
    knot_interval: float = Field(0.1, gt=0.0, le=1.0)
    iekf_epsilon: float = Field(1e-4, gt=0.0)
    iekf_max_iters: int = Field(10, ge=1, le=100)

    # localizability
    use_localizability: bool = True
    loc_eta: float = Field(0.8, gt=0.0, lt=1.0)
    loc_min_points: int = Field(30, ge=1)

    # plane / map gating
    tau_u: float = Field(0.5, gt=0.0)
    tau_pl: float = Field(0.05, gt=0.0)
    plane_rms_bound: float = Field(0.2, gt=0.0)
    plane_neighbors: int = Field(5, ge=3, le=20)
    max_correspondence_distance: float = Field(1.0, gt=0.0)
    # residual gate in standard deviations, applied to every neighbour and to the query at the prior
    association_gate: float = Field(3.0, gt=0.0)

    # sensor noise
    sigma_range: float = Field(0.1, gt=0.0)
    sigma_azimuth_deg: float = Field(1.0, gt=0.0, lt=30.0)
    sigma_elevation_deg: float = Field(1.0, gt=0.0, lt=30.0)
    sigma_doppler: float = Field(0.1, gt=0.0)
    sigma_gyro: float = Field(0.005, gt=0.0)
    sigma_gravity: float = Field(0.01, gt=0.0)
    fallback_point_sigma: float = Field(0.1, gt=0.0)

    # gravity
    gravity_magnitude: float = Field(9.81, gt=0.0)
    gravity_min_norm: float = Field(1.0, ge=0.0)

    # RCS weighting
    rcs_floor: float = Field(0.5, gt=0.0)
    rcs_weight_max: float = Field(2.0, gt=0.0)

    # process noise, per knot
    process_sigma_translation: float = Field(0.05, ge=0.0)
    process_sigma_rotation: float = Field(0.01, ge=0.0)
    process_sigma_accel_bias: float = Field(1e-3, ge=0.0)
    process_sigma_gyro_bias: float = Field(1e-4, ge=0.0)

    # initialization
    init_duration: float = Field(0.5, gt=0.0)
    init_sigma_translation: float = Field(1e-3, gt=0.0)
    init_sigma_rotation: float = Field(1e-3, gt=0.0)
    init_sigma_accel_bias: float = Field(0.05, gt=0.0)
    init_sigma_gyro_bias: float = Field(0.01, gt=0.0)

    # radar preprocessing
    ransac_iterations: int = Field(100, ge=1)
    ransac_threshold: float = Field(0.25, gt=0.0)
    ransac_min_inliers: int = Field(10, ge=3)
    ransac_seed: int = Field(0, ge=0)
    dynamic_gate: float = Field(0.5, gt=0.0)
    ego_jump: float = Field(2.0, gt=0.0)
    min_range: float = Field(0.5, ge=0.0)

    # map
    r_replace: float = Field(0.2, gt=0.0)
    map_window: float = Field(200.0, gt=0.0)
    rebuild_deleted_fraction: float = Field(0.5, gt=0.0, le=1.0)
    rebuild_pending_fraction: float = Field(0.3, gt=0.0, le=1.0)

    # radar-to-IMU extrinsics and Doppler sign (+1: approaching targets read positive)
    extrinsic_rotvec: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extrinsic_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    doppler_sign: Literal[-1, 1] = -1

    # ablation switches
    uncertainty_mode: UncertaintyMode = "full"
    use_plane_residual: bool = True
    use_doppler: bool = True
    use_gravity: bool = True
    use_gyro: bool = True

    # stream handling
    imu_stride: int = Field(1, ge=1)
    max_gap_knots: int = Field(5, ge=1)
    divergence_trace: float = Field(1e6, gt=0.0)

    @field_validator("extrinsic_rotvec")
    @classmethod
    def _rotation_below_pi(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if sum(v * v for v in value) ** 0.5 >= 3.141592653589793:
            raise ValueError("rotation vector norm must be below pi")
        return value


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        location = ".".join(str(p) for p in err.get("loc", ())) or "<root>"
        parts.append(f"{location}: {err.get('msg')}")
    return "; ".join(parts)


def validate_pipeline_config(data: Mapping[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(dict(data))
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def load_pipeline_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """Defaults, overridden by the JSON file at ``path``, overridden by ``overrides``."""
    data: dict[str, Any] = {}
    source = path or settings.config_path
    if source:
        try:
            raw = Path(source).read_text(encoding="utf-8")
            loaded = json.loads(raw)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{source}: top-level JSON value must be an object")
        data.update(loaded)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return validate_pipeline_config(data)
