# app/core/artifacts.py
from __future__ import annotations

import logging
import uuid
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Tuple
from urllib.parse import quote

from app.core.config import settings

__all__ = [
    "ARTIFACT_TTL",
    "configure_artifacts_dir",
    "get_artifacts_dir",
    "new_artifact_path",
    "resolve_artifact",
    "purge_expired_artifacts",
    "build_artifact_url",
]

logger = logging.getLogger(__name__)

ARTIFACT_TTL = timedelta(hours=settings.artifact_ttl_hours)

_artifacts_dir = Path(settings.output_dir).resolve()


def configure_artifacts_dir(path: str | Path) -> Path:
    global _artifacts_dir
    _artifacts_dir = Path(path).resolve()
    _artifacts_dir.mkdir(parents=True, exist_ok=True)
    return _artifacts_dir


def _iter_artifact_files() -> Iterable[Path]:
    try:
        yield from (p for p in _artifacts_dir.iterdir() if p.is_file())
    except FileNotFoundError:
        _artifacts_dir.mkdir(parents=True, exist_ok=True)
        return


def purge_expired_artifacts(*, now: Optional[datetime] = None) -> int:
    cutoff = (now or datetime.now(timezone.utc)) - ARTIFACT_TTL
    removed = 0
    for file_path in _iter_artifact_files():
        try:
            mtime = datetime.fromtimestamp(file_path.stat().st_mtime, tz=timezone.utc)
        except OSError:
            continue
        if mtime <= cutoff:
            try:
                file_path.unlink(missing_ok=True)
                removed += 1
            except OSError:
                continue
    if removed:
        logger.info("Purged %d expired artifacts", removed)
    return removed


def get_artifacts_dir() -> Path:
    """Return the directory where run outputs are stored."""
    _artifacts_dir.mkdir(parents=True, exist_ok=True)
    purge_expired_artifacts()
    return _artifacts_dir


def new_artifact_path(stem: str, suffix: str) -> Tuple[str, Path]:
    """Fresh unique file name in the artifact directory; the caller writes the file."""
    directory = get_artifacts_dir()
    normalized = suffix if suffix.startswith(".") else f".{suffix}"
    filename = f"{uuid.uuid4().hex[:12]}_{stem}{normalized}"
    return filename, directory / filename


def resolve_artifact(file_name: str) -> Optional[Path]:
    """Path of an existing artifact, or None for unknown or unsafe names."""
    if Path(file_name).name != file_name or file_name in ("", ".", ".."):
        return None
    file_path = _artifacts_dir / file_name
    if not file_path.exists() or not file_path.is_file():
        return None
    return file_path


def build_artifact_url(file_name: str, base_url: str | None = None) -> str:
    base = (base_url if base_url is not None else settings.public_base_url).rstrip("/")
    path = f"/artifacts/{quote(file_name)}"
    return f"{base}{path}" if base else path
