import json
import math

import numpy as np
import pytest

from sqmanifold.geometry import direction_packing, directed_distances, hausdorff, unit_ball_volume
from sqmanifold.models import SphereModel, circle_through_origin, make_sphere
from sqmanifold.oracle import OracleSession
from sqmanifold.propagation import (EstimatorSettings, PropagationConfig, PropagationError, closeness_instrument,
                                    estimate_bounding_ball, estimate_fixed_point, evaluate, geodesic_covering,
                                    loop_bound, perfect_routines, propagate, separation_bound)
from sqmanifold.routines import HypothesisError, RoutineParams


@pytest.fixture
def unit_circle():
    return SphereModel(1, 2, 1.0)


def perfect_config(rch=1.0):
    step = rch / 24.0
    return PropagationConfig(step, step / 2.0, rch=rch)


# --- config ---------------------------------------------------------------------------------
@pytest.mark.parametrize("kw", [
    dict(step=0.04, proximity=0.01),
    dict(step=0.04, proximity=0.03),
    dict(step=0.04, proximity=0.02, sin_alpha=0.1),
    dict(step=0.1, proximity=0.05, rch=1.0),
    dict(step=0.04, proximity=0.02, eta=0.001),
])
def test_config_rejects_out_of_range(kw):
    with pytest.raises(HypothesisError):
        PropagationConfig(**kw).validate()


def test_config_accepts_boundaries():
    PropagationConfig(1 / 24, 0.3 / 24, rch=1.0, eta=1 / (24 * 64)).validate()
    PropagationConfig(1 / 24, 0.7 / 24, rch=1.0).validate()


# --- propagation with ground-truth routines -------------------------------------------------
def test_perfect_routines_cover_circle(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    cfg = perfect_config()
    est = propagate(np.array([1.0, 0.0]), tangent, project, cfg)
    assert len(est.points) == len(est.tangents) == est.loops
    assert np.max(unit_circle.distance(est.points)) < 1e-12
    ref = unit_circle.reference_cloud(cfg.step / 20).points
    assert hausdorff(est.points, ref) <= cfg.step
    assert geodesic_covering(unit_circle, est.points, cfg.step / 20) <= cfg.step


def test_perfect_routines_keep_separation(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    cfg = perfect_config()
    est = propagate(np.array([1.0, 0.0]), tangent, project, cfg, closeness_instrument(unit_circle))
    floor = separation_bound(cfg, 1.0, 0.0)
    assert floor > 0
    for rec in est.loop_records:
        assert rec.max_distance < 1e-12
        assert rec.min_separation >= floor - 1e-12


def test_loop_bound_circle_arithmetic():
    delta = 1 / 48
    assert loop_bound(2 * math.pi, 1, delta) == pytest.approx(math.pi * 32 / delta)
    assert unit_ball_volume(1) == pytest.approx(2.0)


def test_loop_count_below_bound(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    cfg = perfect_config()
    est = propagate(np.array([1.0, 0.0]), tangent, project, cfg)
    assert est.loops <= loop_bound(2 * math.pi, 1, cfg.proximity)


def test_sphere_perfect_routines():
    sphere = SphereModel(2, 3, 1.0)
    tangent, project = perfect_routines(sphere)
    cfg = PropagationConfig(1 / 24, 1 / 48, sin_alpha=1 / 64, rch=1.0)
    est = propagate(np.array([0.0, 0.0, 1.0]), tangent, project, cfg)
    ref = sphere.reference_cloud(cfg.step / 4).points
    assert directed_distances(ref, est.points).max() <= cfg.step
    assert est.loops <= loop_bound(4 * math.pi, 2, cfg.proximity)


def test_first_loop_adds_at_most_packing_size(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    cfg = perfect_config()
    cfg.max_loops = 1
    with pytest.raises(PropagationError) as info:
        propagate(np.array([1.0, 0.0]), tangent, project, cfg)
    snapshot = info.value.queue_snapshot
    packing = direction_packing(tangent(np.array([1.0, 0.0])), cfg.sin_alpha)
    assert 1 <= len(snapshot) <= len(packing)


def test_max_loops_diagnostic_carries_queue(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    cfg = perfect_config()
    cfg.max_loops = 5
    with pytest.raises(PropagationError) as info:
        propagate(np.array([1.0, 0.0]), tangent, project, cfg)
    assert info.value.queue_snapshot.shape[1] == 2
    assert len(info.value.queue_snapshot) > 0


def test_propagation_is_deterministic(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    a = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    b = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    assert np.array_equal(a.points, b.points)


# --- evaluation -----------------------------------------------------------------------------
def test_evaluate_exact_sample(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    est = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    r_ref = 0.001
    dense = unit_circle.reference_cloud(r_ref).points
    est.points = dense
    est.output = dense
    est.tangents = [tangent(p) for p in dense]
    m = evaluate(est, unit_circle, r_ref)
    assert m.hausdorff <= r_ref
    assert m.max_tangent_angle < 1e-9


def test_evaluate_outlier_distance(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    est = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    outlier = np.array([[4.0, 0.0]])
    est.points = np.vstack([est.points, outlier])
    est.tangents = est.tangents + [est.tangents[0]]
    m = evaluate(est, unit_circle, 0.01)
    assert m.max_distance == pytest.approx(3.0)


def test_evaluate_covering_monotone(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    est = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    ref = unit_circle.reference_cloud(0.005)
    est.output = est.points[::4]
    coarse = evaluate(est, unit_circle, 0.005, reference=ref.points).covering_radius
    est.output = est.points[::2]
    fine = evaluate(est, unit_circle, 0.005, reference=ref.points).covering_radius
    assert fine <= coarse


def test_evaluate_flags_coarse_reference(unit_circle):
    tangent, project = perfect_routines(unit_circle)
    est = propagate(np.array([1.0, 0.0]), tangent, project, perfect_config())
    m = evaluate(est, unit_circle, 0.01, eps=0.05)
    assert m.coarse_reference
    assert not evaluate(est, unit_circle, 0.004, eps=0.05).coarse_reference


# --- end-to-end estimators ------------------------------------------------------------------
def test_fixed_point_estimator_on_circle():
    model = circle_through_origin(5, 1.0, seed=0)
    params = RoutineParams.from_model(model, 0.0)
    eps = 1.0 / 50
    session = OracleSession(model, 0.0)
    est = estimate_fixed_point(session, params, eps)
    m = evaluate(est, model, eps / 10, eps)
    assert m.hausdorff <= 4 * eps
    assert m.queries == session.budget_used
    assert len(est.points) == est.loops
    payload = json.loads(est.to_json())
    assert payload["transcript"]["count"] == session.budget_used


def test_fixed_point_rejects_nonpositive_eps():
    model = circle_through_origin(5, 1.0, seed=0)
    params = RoutineParams.from_model(model, 0.0)
    session = OracleSession(model, 0.0)
    with pytest.raises(HypothesisError):
        estimate_fixed_point(session, params, 0.0)
    assert session.budget_used == 0


def test_bounding_ball_on_translated_circle():
    rng = np.random.default_rng(1)
    center = rng.normal(size=5)
    center *= 4.0 / np.linalg.norm(center)
    model = make_sphere(1, 5, 1.0, center=center, seed=1)
    assert not model.contains_origin
    params = RoutineParams.from_model(model, 0.0)
    eps = 1.0 / 25
    R = 10.0
    session = OracleSession(model, 0.0)
    est = estimate_bounding_ball(session, params, eps, R, EstimatorSettings())
    m = evaluate(est, model, eps / 10, eps)
    assert m.hausdorff <= 4 * eps
    assert est.seed_queries <= 6 * 5 * math.log(12 * R / eps)


def test_bounding_ball_rejects_small_radius():
    model = circle_through_origin(5, 1.0, seed=0)
    params = RoutineParams.from_model(model, 0.0)
    session = OracleSession(model, 0.0)
    with pytest.raises(HypothesisError):
        estimate_bounding_ball(session, params, 0.04, 0.5)
    assert session.budget_used == 0
