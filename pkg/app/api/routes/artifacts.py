# app/api/routes/artifacts.py
from __future__ import annotations

from pathlib import Path

from fastapi import APIRouter, HTTPException
from fastapi.responses import FileResponse

from app.core.artifacts import get_artifacts_dir, resolve_artifact

router = APIRouter()

_MEDIA_TYPES = {
    ".csv": "text/csv",
    ".txt": "text/plain",
    ".jsonl": "application/x-ndjson",
    ".json": "application/json",
    ".ply": "application/octet-stream",
    ".npz": "application/octet-stream",
}


@router.get("/artifacts/{file_name}")
async def download_artifact(file_name: str) -> FileResponse:
    safe_name = Path(file_name).name
    if safe_name != file_name:
        raise HTTPException(status_code=400, detail="Gecersiz dosya adi")

    get_artifacts_dir()
    file_path = resolve_artifact(safe_name)
    if file_path is None:
        raise HTTPException(status_code=404, detail="Dosya bulunamadi")

    media_type = _MEDIA_TYPES.get(file_path.suffix.lower(), "application/octet-stream")
    return FileResponse(file_path, media_type=media_type, filename=safe_name)
