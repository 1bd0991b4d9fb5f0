# tests/test_preprocess.py
from __future__ import annotations

import numpy as np
import pytest

from app.models.domain import EgoVelocity, RadarScan
from app.services.preprocess_service import (
    PreprocessService,
    estimate_ego_velocity,
    filter_dynamic,
    stabilize_ego,
)

V_TRUE = np.array([3.0, 0.5, 0.1])


def make_scan(rng, velocity=V_TRUE, count=60, noise=0.0, outliers=0, scan_id=0) -> RadarScan:
    az = rng.uniform(-1.0, 1.0, count)
    el = rng.uniform(-0.35, 0.35, count)
    ranges = rng.uniform(2.0, 60.0, count)
    directions = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    dopplers = -directions @ velocity + rng.normal(scale=noise, size=count) if noise else -directions @ velocity
    dopplers[:outliers] += rng.uniform(3.0, 8.0, outliers)
    times = 0.01 * np.arange(count) / count
    return RadarScan(0.0, times, ranges, az, el, dopplers, rng.uniform(-5.0, 15.0, count), scan_id=scan_id)


def test_static_scene_gives_zero_velocity(rng):
    ego = estimate_ego_velocity(make_scan(rng, velocity=np.zeros(3)))
    assert ego.valid
    np.testing.assert_array_equal(ego.velocity, np.zeros(3))
    assert ego.inliers == 60


def test_noiseless_scene_recovers_velocity(rng):
    ego = estimate_ego_velocity(make_scan(rng))
    assert ego.valid
    np.testing.assert_allclose(ego.velocity, V_TRUE, atol=1e-10)


def test_ransac_rejects_movers(rng):
    ego = estimate_ego_velocity(make_scan(rng, noise=0.05, outliers=18))
    assert ego.valid
    assert ego.inliers >= 40
    assert np.linalg.norm(ego.velocity - V_TRUE) < 0.15


def test_opposite_sign_convention(rng):
    scan = make_scan(rng)
    scan.dopplers = -scan.dopplers
    np.testing.assert_allclose(estimate_ego_velocity(scan, sign=1.0).velocity, V_TRUE, atol=1e-10)


def test_too_few_returns_is_invalid(rng):
    ego = estimate_ego_velocity(make_scan(rng, count=5))
    assert not ego.valid
    assert ego.inliers == 0


def test_estimate_is_deterministic_for_seed(rng):
    scan = make_scan(rng, noise=0.05, outliers=20)
    first = estimate_ego_velocity(scan, seed=3)
    second = estimate_ego_velocity(scan, seed=3)
    np.testing.assert_array_equal(first.velocity, second.velocity)
    assert first.inliers == second.inliers


def test_filter_keeps_static_and_drops_mover(rng):
    scan = make_scan(rng)
    scan.dopplers[7] += 5.0
    ego = EgoVelocity(V_TRUE, 59, True)
    kept = filter_dynamic(scan, ego, 0.5)
    assert len(kept) == 59
    assert 7 not in set(np.flatnonzero(np.isin(scan.times, kept.times)))
    assert len(filter_dynamic(scan, ego, np.inf)) == len(scan)


def test_filter_is_monotone_in_gate(rng):
    scan = make_scan(rng, noise=0.3)
    ego = EgoVelocity(V_TRUE, 60, True)
    previous = 0
    for gate in (0.05, 0.1, 0.3, 0.6, 1.0):
        kept = filter_dynamic(scan, ego, gate)
        assert len(kept) >= previous
        assert set(kept.times) <= set(scan.times)
        previous = len(kept)


def test_invalid_ego_passes_scan_through(rng, caplog):
    scan = make_scan(rng)
    out = filter_dynamic(scan, EgoVelocity.invalid(), 0.5)
    assert out is scan
    assert "dynamic filtering skipped" in caplog.text


@pytest.mark.parametrize(
    ("current", "reused"),
    [
        (EgoVelocity(np.array([1.1, 0.0, 0.0]), 30, True), False),
        (EgoVelocity(np.array([5.0, 0.0, 0.0]), 30, True), True),
        (EgoVelocity.invalid(), True),
    ],
    ids=["small-change", "jump", "invalid"],
)
def test_stabilize_rules(current, reused):
    previous = EgoVelocity(np.array([1.0, 0.0, 0.0]), 40, True)
    out = stabilize_ego(current, previous, jump=2.0)
    assert out.reused is reused
    assert out.valid
    expected = previous.velocity if reused else current.velocity
    np.testing.assert_array_equal(out.velocity, expected)


@pytest.mark.parametrize("previous", [None, EgoVelocity.invalid()], ids=["no-history", "invalid-history"])
def test_stabilize_without_history_flags_invalid(previous):
    current = EgoVelocity(np.array([0.3, 0.0, 0.0]), 2, False)
    out = stabilize_ego(current, previous, 2.0)
    assert not out.valid
    assert out.reused is True
    np.testing.assert_array_equal(out.velocity, current.velocity)


def test_stabilize_without_history_keeps_valid_estimate():
    current = EgoVelocity(np.array([0.3, 0.0, 0.0]), 30, True)
    out = stabilize_ego(current, None, 2.0)
    assert out.valid and not out.reused


def test_service_skips_dynamic_filter_when_ego_is_unknown(rng):
    service = PreprocessService(min_range=0.5, min_inliers=1000)
    scan = make_scan(rng, scan_id=1)
    kept, ego = service.process(scan)
    assert not ego.valid and ego.reused
    assert len(kept) == int(np.count_nonzero(scan.ranges > 0.5))
    assert service.previous is None


def test_service_gates_range_and_reuses_velocity(rng):
    service = PreprocessService(min_range=5.0)
    scan = make_scan(rng, scan_id=1)
    kept, ego = service.process(scan)
    assert np.all(kept.ranges > 5.0)
    assert ego.valid and not ego.reused
    jumped = make_scan(rng, velocity=V_TRUE + np.array([4.0, 0.0, 0.0]), scan_id=2)
    _, second = service.process(jumped)
    assert second.reused
    np.testing.assert_allclose(second.velocity, ego.velocity)
