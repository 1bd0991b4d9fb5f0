# app/api/routes/odometry.py
from __future__ import annotations

import logging
from pathlib import Path

from fastapi import APIRouter, HTTPException, Request

from app.adapters.streams import text_io
from app.core.artifacts import build_artifact_url, new_artifact_path, resolve_artifact
from app.core.config import PipelineConfig, validate_pipeline_config
from app.core.errors import (
    ConfigError,
    DivergenceError,
    EvaluationError,
    FormatParseError,
    ScenarioError,
    StreamGapError,
)
from app.models.schemas import (
    ArtifactLink,
    EvaluateRequest,
    MetricsResponse,
    OdometryRunRequest,
    OdometryRunResponse,
    SimulateRequest,
    SimulateResponse,
)
from app.services.evaluation_service import evaluate
from app.services.odometry_service import run_odometry
from app.services.simulation_service import SyntheticScenario, generate_scenario

logger = logging.getLogger(__name__)

router = APIRouter()


def _link(name: str) -> ArtifactLink:
    return ArtifactLink(name=name, url=build_artifact_url(name))


def _write(stem: str, suffix: str, writer, payload) -> str:
    name, path = new_artifact_path(stem, suffix)
    writer(path, payload)
    return name


def _artifact(name: str) -> Path:
    path = resolve_artifact(name)
    if path is None:
        raise HTTPException(status_code=404, detail=f"Dosya bulunamadi: {name}")
    return path


def _merged_config(request: Request, overrides: dict) -> PipelineConfig:
    base = getattr(request.app.state, "pipeline_config", None) or PipelineConfig()
    try:
        return validate_pipeline_config({**base.model_dump(), **overrides})
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=f"Gecersiz konfigurasyon: {e}")


def _simulate(spec) -> SyntheticScenario:
    try:
        return generate_scenario(spec)
    except ScenarioError as e:
        raise HTTPException(status_code=422, detail=f"Senaryo uretilemedi: {e}")


@router.post("/simulate", response_model=SimulateResponse)
def simulate(payload: SimulateRequest):
    scenario = _simulate(payload.spec)
    names = [
        _write("radar", ".csv", text_io.write_radar, scenario.scans),
        _write("imu", ".csv", text_io.write_imu, scenario.imu),
        _write("ground_truth", ".txt", text_io.write_trajectory, scenario.ground_truth_trajectory()),
    ]
    return SimulateResponse(
        frames=len(scenario.scans),
        radar_points=sum(len(s) for s in scenario.scans),
        imu_samples=len(scenario.imu),
        files=[_link(n) for n in names],
    )


@router.post("/odometry/run", response_model=OdometryRunResponse)
def run(payload: OdometryRunRequest, request: Request):
    config = _merged_config(request, payload.config)
    ground_truth = None
    if payload.scenario is not None:
        scenario = _simulate(payload.scenario)
        scans, imu = scenario.scans, scenario.imu
        ground_truth = scenario.ground_truth_trajectory()
    elif payload.radar_artifact and payload.imu_artifact:
        try:
            scans = text_io.read_radar(_artifact(payload.radar_artifact))
            imu = text_io.read_imu(_artifact(payload.imu_artifact))
        except FormatParseError as e:
            raise HTTPException(status_code=400, detail=f"Dosya okunamadi: {e}")
    else:
        raise HTTPException(status_code=400, detail="scenario veya radar_artifact ile imu_artifact zorunludur")

    try:
        result = run_odometry(config, scans, imu)
    except StreamGapError as e:
        name = _write("checkpoint", ".npz", text_io.save_checkpoint, e.checkpoint)
        raise HTTPException(status_code=409, detail=f"Veri akisinda bosluk: {e} (checkpoint: {name})")
    except DivergenceError as e:
        logger.error("Odometry diverged: %s", e)
        raise HTTPException(status_code=500, detail=f"Filtre iraksadi: {e}")

    names = [
        _write("trajectory", ".txt", text_io.write_trajectory, result.trajectory),
        _write("map", ".txt", text_io.write_map_text, result.map_arrays),
        _write("map", ".ply", text_io.write_map_ply, result.map_arrays),
        _write("diagnostics", ".jsonl", text_io.write_diagnostics, result.diagnostics),
    ]
    metrics = None
    if ground_truth is not None:
        names.append(_write("ground_truth", ".txt", text_io.write_trajectory, ground_truth))
        try:
            m = evaluate(result.trajectory, ground_truth, align=True)
            metrics = MetricsResponse(**m.as_dict())
        except EvaluationError as e:
            logger.warning("Evaluation skipped: %s", e)

    return OdometryRunResponse(
        knots=result.knots,
        poses=len(result.trajectory),
        map_points=len(result.map_arrays),
        runtime_s=result.runtime_s,
        metrics=metrics,
        files=[_link(n) for n in names],
    )


@router.post("/evaluate", response_model=MetricsResponse)
def evaluate_artifacts(payload: EvaluateRequest):
    try:
        est = text_io.read_trajectory(_artifact(payload.estimate_artifact))
        gt = text_io.read_trajectory(_artifact(payload.ground_truth_artifact))
    except FormatParseError as e:
        raise HTTPException(status_code=400, detail=f"Dosya okunamadi: {e}")
    try:
        metrics = evaluate(est, gt, align=payload.align)
    except EvaluationError as e:
        raise HTTPException(status_code=422, detail=f"Degerlendirme yapilamadi: {e}")
    return MetricsResponse(**metrics.as_dict())
