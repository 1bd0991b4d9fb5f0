# app/api/routes/config.py
from __future__ import annotations

from fastapi import APIRouter, Request

from app.core.config import PipelineConfig, validate_pipeline_config
from app.core.errors import ConfigError
from app.models.schemas import ConfigValidateRequest, ConfigValidateResponse

router = APIRouter()


@router.get("/config")
async def get_config(request: Request):
    config = getattr(request.app.state, "pipeline_config", None) or PipelineConfig()
    return config.model_dump(mode="json")


@router.post("/config/validate", response_model=ConfigValidateResponse)
async def validate_config(payload: ConfigValidateRequest):
    try:
        config = validate_pipeline_config(payload.config)
    except ConfigError as e:
        return ConfigValidateResponse(valid=False, errors=str(e))
    return ConfigValidateResponse(valid=True, config=config.model_dump(mode="json"))
