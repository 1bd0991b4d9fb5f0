# app/main.py
import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api.routes.artifacts import router as artifacts_router
from app.api.routes.config import router as config_router
from app.api.routes.health import router as health_router
from app.api.routes.odometry import router as odometry_router
from app.core.config import settings
from app.core.lifespan import lifespan

logging.basicConfig(level=settings.log_level)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="Radar-Inertial Odometry API",
    description="Continuous-time radar-inertial odometry: simulation, estimation and evaluation",
    version="1.0.0",
    lifespan=lifespan,
)

app.include_router(odometry_router, tags=["odometry"])
app.include_router(config_router, tags=["config"])
app.include_router(artifacts_router, tags=["artifacts"])
app.include_router(health_router, tags=["health"])

# Parse CORS origins from environment
cors_origins = settings.cors_origins.split(",") if settings.cors_origins != "*" else ["*"]

app.add_middleware(
    CORSMiddleware,
    allow_origins=cors_origins,
    allow_credentials=settings.cors_allow_credentials,
    allow_methods=["*"],
    allow_headers=["*"],
)

if __name__ == "__main__":
    import uvicorn

    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True)
