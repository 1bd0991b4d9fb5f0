# app/core/lifespan.py
from contextlib import asynccontextmanager
import logging

from app.core.artifacts import configure_artifacts_dir, purge_expired_artifacts
from app.core.config import load_pipeline_config, settings
from app.core.errors import ConfigError

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app):
    artifacts_dir = configure_artifacts_dir(settings.output_dir)
    purge_expired_artifacts()
    logger.info("Artifact directory ready: %s (TTL %s h).", artifacts_dir, settings.artifact_ttl_hours)

    try:
        app.state.pipeline_config = load_pipeline_config()
        if settings.config_path:
            logger.info("Default pipeline config loaded from %s.", settings.config_path)
    except ConfigError as e:
        logger.error("Invalid default pipeline config: %s", e)
        raise

    try:
        yield
    finally:
        logger.info("Shutting down...")
