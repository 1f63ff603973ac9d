import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqmanifold.geometry import (DimensionError, Subspace, direction_packing, farthest_point_sample, hausdorff,
                                 lattice_norm_counts, min_pairwise_distance, orthonormalize, principal_angle,
                                 project_onto, sphere_area, unit_ball_volume)


def test_volumes_of_low_dimensional_balls_and_spheres():
    assert unit_ball_volume(1) == pytest.approx(2.0)
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)
    assert sphere_area(1) == pytest.approx(2 * math.pi)
    assert sphere_area(2) == pytest.approx(4 * math.pi)


def test_projection_onto_axis_aligned_plane():
    T = Subspace(np.eye(3)[:, :2])
    assert np.allclose(project_onto([1, 2, 3], T), [1, 2, 0])


def test_projection_is_idempotent_on_members():
    T = Subspace(np.eye(3)[:, :2])
    v = np.array([0.3, -2.0, 0.0])
    assert np.allclose(project_onto(v, T), v)


def test_projection_residual_is_orthogonal(rng):
    T = Subspace.random(6, 2, rng)
    v = rng.standard_normal(6)
    r = v - project_onto(v, T)
    assert np.abs(T.frame.T @ r).max() < 1e-12


def test_rank_deficient_frame_is_rejected():
    with pytest.raises(DimensionError):
        Subspace(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))


def test_dimension_mismatch_is_rejected():
    with pytest.raises(DimensionError):
        project_onto(np.ones(4), Subspace(np.eye(3)[:, :1]))


def test_principal_angle_examples():
    e1, e2 = Subspace(np.array([[1.0], [0.0]])), Subspace(np.array([[0.0], [1.0]]))
    assert principal_angle(e1, e1) == pytest.approx(0.0, abs=1e-15)
    assert principal_angle(e1, e2) == pytest.approx(1.0)
    t = math.pi / 6
    line = Subspace(np.array([[math.cos(t)], [math.sin(t)]]))
    assert principal_angle(e1, line) == pytest.approx(0.5)


def test_principal_angle_needs_equal_dimensions():
    with pytest.raises(DimensionError):
        principal_angle(Subspace(np.eye(3)[:, :1]), Subspace(np.eye(3)[:, :2]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_principal_angle_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, n))
    A, B = Subspace.random(n, d, rng), Subspace.random(n, d, rng)
    a = principal_angle(A, B)
    assert 0.0 <= a <= 1.0 + 1e-12
    assert a == pytest.approx(principal_angle(B, A), abs=1e-10)


def test_hausdorff_examples():
    assert hausdorff([[0.0, 0.0]], [[0.0, 0.0]]) == 0.0
    assert hausdorff([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
    assert hausdorff([[0, 0], [1, 0]], [[0, 1]]) == pytest.approx(math.sqrt(2))


def test_hausdorff_rejects_empty_sets():
    with pytest.raises(ValueError):
        hausdorff(np.zeros((0, 2)), [[0.0, 0.0]])


def test_direction_packing_on_a_line_is_two_antipodes():
    T = Subspace(np.array([[0.6], [0.8], [0.0]]))
    V = direction_packing(T, 0.5)
    assert len(V) == 2
    assert np.allclose(V[0], -V[1])


def test_direction_packing_plane_cardinality_and_covering():
    T = Subspace(np.eye(4)[:, :2])
    s = 1.0 / 64.0
    V = direction_packing(T, s)
    assert len(V) >= 32
    ang = np.linspace(0.0, 2 * math.pi, 10_000, endpoint=False)
    probes = np.column_stack([np.cos(ang), np.sin(ang), np.zeros_like(ang), np.zeros_like(ang)])
    gaps = np.min(np.linalg.norm(probes[:, None, :] - V[None, :, :], axis=2), axis=1)
    assert gaps.max() <= 2 * s
    pair = np.linalg.norm(V[:, None] - V[None], axis=2)[~np.eye(len(V), dtype=bool)]
    assert pair.min() > 2 * s


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_direction_packing_rejects_out_of_range_separation(bad):
    with pytest.raises(ValueError):
        direction_packing(Subspace(np.eye(2)[:, :1]), bad)


def test_farthest_point_sample_examples():
    assert np.allclose(farthest_point_sample(np.zeros((1, 2)), 0.3), np.zeros((1, 2)))
    X = np.column_stack([np.linspace(0, 1, 11), np.zeros(11)])
    S = farthest_point_sample(X, 0.35)
    xs = np.sort(S[:, 0])
    assert np.all(np.diff(xs) >= 0.35 - 1e-12)
    assert np.max(np.min(np.abs(X[:, :1] - S[:, 0][None, :]), axis=1)) <= 0.35 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_farthest_point_sample_is_a_fixed_point(seed, delta):
    X = np.random.default_rng(seed).random((60, 3))
    S = farthest_point_sample(X, delta)
    assert len(S) <= len(X)
    assert min_pairwise_distance(S) >= delta or len(S) == 1
    S2 = farthest_point_sample(S, delta)
    assert len(S2) == len(S)


def test_orthonormalize_returns_orthonormal_columns(rng):
    Q = orthonormalize(rng.standard_normal((5, 3)))
    assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)


def test_lattice_norm_counts_small_cases():
    cum = lattice_norm_counts(2, 2)
    # points of Z^2 with |z|^2 <= 0, 1, 2
    assert list(cum[2]) == [1, 5, 9]
    assert list(cum[1]) == [1, 3, 3]
