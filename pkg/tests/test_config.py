# tests/test_config.py
from __future__ import annotations

import json

import pytest

from app.core.config import PipelineConfig, load_pipeline_config, validate_pipeline_config
from app.core.errors import ConfigError


def test_defaults():
    config = PipelineConfig()
    assert config.knot_interval == 0.1
    assert config.loc_eta == 0.8
    assert config.loc_min_points == 30
    assert config.plane_neighbors == 5
    assert config.uncertainty_mode == "full"
    assert config.doppler_sign == -1


@pytest.mark.parametrize(
    ("data", "field"),
    [
        ({"knot_interval": 0.0}, "knot_interval"),
        ({"loc_eta": 1.0}, "loc_eta"),
        ({"plane_neighbors": 2}, "plane_neighbors"),
        ({"uncertainty_mode": "partial"}, "uncertainty_mode"),
        ({"doppler_sign": 0}, "doppler_sign"),
        ({"extrinsic_rotvec": [0.0, 0.0, 3.2]}, "extrinsic_rotvec"),
        ({"unknown_key": 1}, "unknown_key"),
    ],
)
def test_invalid_values_name_the_field(data, field):
    with pytest.raises(ConfigError) as info:
        validate_pipeline_config(data)
    assert field in str(info.value)
    assert info.value.exit_code == 2


def test_config_is_frozen():
    config = PipelineConfig()
    with pytest.raises(Exception):
        config.knot_interval = 0.2


def test_file_then_overrides(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps({"knot_interval": 0.05, "tau_u": 0.3}), encoding="utf-8")
    config = load_pipeline_config(path, {"tau_u": 0.4, "loc_eta": None})
    assert config.knot_interval == 0.05
    assert config.tau_u == 0.4
    assert config.loc_eta == 0.8


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_pipeline_config(tmp_path / "absent.json")


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text('{\n  "knot_interval": 0.1,\n  oops\n}', encoding="utf-8")
    with pytest.raises(ConfigError, match=":3:"):
        load_pipeline_config(path)


def test_non_object_json(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="object"):
        load_pipeline_config(path)


def test_settings_config_path_is_used(tmp_path, monkeypatch):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps({"iekf_max_iters": 4}), encoding="utf-8")
    monkeypatch.setattr("app.core.config.settings.config_path", str(path))
    assert load_pipeline_config().iekf_max_iters == 4
