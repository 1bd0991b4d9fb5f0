# tests/conftest.py
from __future__ import annotations

import numpy as np
import pytest

from app.core.spline import SplineWindow
from app.models.domain import FilterState
from tests.helpers import make_state, make_window


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def window(rng) -> SplineWindow:
    return make_window(rng)


@pytest.fixture
def state(rng) -> FilterState:
    return make_state(rng)


@pytest.fixture
def artifacts_dir(tmp_path, monkeypatch):
    from app.core import artifacts

    directory = tmp_path / "artifacts"
    artifacts.configure_artifacts_dir(directory)
    monkeypatch.setattr("app.core.config.settings.output_dir", str(directory))
    return directory
