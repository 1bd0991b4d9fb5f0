# app/api/routes/health.py
from __future__ import annotations

from fastapi import APIRouter, Request

from app.core.artifacts import get_artifacts_dir

router = APIRouter()


@router.get("/health")
async def health_check(request: Request):
    config = getattr(request.app.state, "pipeline_config", None)
    try:
        writable = get_artifacts_dir().is_dir()
    except OSError as e:
        return {"status": "degraded", "error": str(e)}
    return {"status": "healthy", "artifacts": writable, "config_loaded": config is not None}
