import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chancecbf.errors import Degenerate, Empty, NegativeDistance, Unbounded
from chancecbf.geometry import (
    FaceDistance,
    distance_to_faces,
    enumerate_vertices,
    eta,
    gamma_for,
    polytope_from_halfspaces,
    risk_budget,
)
from chancecbf.systems import lift_position_constraints

from conftest import random_polygon

SQUARE_A = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
SQUARE_B = np.ones(4)
TRIANGLE_A = np.array([[-1.0, 0], [0, -1], [1, 1]])
TRIANGLE_B = np.array([0.0, 0, 1])


def as_set(points, nd=9):
    return {tuple(np.round(p, nd) + 0.0) for p in np.atleast_2d(points)}


def brute_force_vertices(A, b, tol=1e-9):
    """Independent oracle: solve every n-subset of faces, keep feasible points."""
    n = A.shape[1]
    pts = []
    for idx in itertools.combinations(range(A.shape[0]), n):
        sub = A[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b[list(idx)])
        if np.all(A @ x <= b + tol):
            pts.append(x)
    out = []
    for p in pts:
        if not any(np.linalg.norm(p - q) <= 1e-9 for q in out):
            out.append(p)
    return np.array(out)


def test_unit_square_vertices():
    p = polytope_from_halfspaces(SQUARE_A, SQUARE_B)
    assert as_set(p.vertices) == as_set([(1, 1), (1, -1), (-1, 1), (-1, -1)])


def test_triangle_vertices():
    p = polytope_from_halfspaces(TRIANGLE_A, TRIANGLE_B)
    assert as_set(p.vertices) == as_set([(0, 0), (1, 0), (0, 1)])


def test_half_plane_is_unbounded():
    with pytest.raises(Unbounded):
        polytope_from_halfspaces([[1.0, 0.0]], [1.0])


def test_infeasible_system_is_empty():
    with pytest.raises(Empty):
        polytope_from_halfspaces([[1.0, 0], [-1, 0], [0, 1], [0, -1]], [-1.0, -1.0, 1.0, 1.0])


def test_flat_polytope_is_degenerate():
    with pytest.raises(Degenerate):
        polytope_from_halfspaces([[1.0, 0], [-1, 0], [0, 1], [0, -1]], [0.0, 0.0, 1.0, 1.0])


def test_cube_has_eight_vertices():
    A = np.vstack([np.eye(3), -np.eye(3)])
    p = polytope_from_halfspaces(A, np.ones(6))
    assert len(p.vertices) == 8


def test_duplicate_face_is_dropped_with_ids_kept():
    A = np.vstack([SQUARE_A, [[1.0, 0.0]]])
    p = polytope_from_halfspaces(A, np.append(SQUARE_B, 1.0))
    assert as_set(p.vertices) == as_set([(1, 1), (1, -1), (-1, 1), (-1, -1)])
    assert p.n_faces == 4
    assert set(p.face_ids) <= set(range(5))


def test_redundant_face_is_dropped():
    A = np.vstack([SQUARE_A, [[1.0, 1.0]]])
    p = polytope_from_halfspaces(A, np.append(SQUARE_B, 5.0))
    assert p.face_ids == (0, 1, 2, 3)


def test_enumerate_vertices_matches_brute_force_on_pentagon_times_box():
    rng = np.random.default_rng(3)
    A2, b2 = random_polygon(rng, 5, 5)
    poly = lift_position_constraints(polytope_from_halfspaces(A2, b2), 1.5)
    oracle = brute_force_vertices(poly.A, poly.b)
    assert len(poly.vertices) == 20
    assert as_set(poly.vertices) == as_set(oracle)


@pytest.mark.parametrize("seed", range(10))
def test_vertex_oracle_random_polygons(seed):
    rng = np.random.default_rng(seed)
    A, b = random_polygon(rng)
    p = polytope_from_halfspaces(A, b)
    assert as_set(enumerate_vertices(p)) == as_set(brute_force_vertices(A, b))


def test_every_stored_face_touches_a_vertex():
    rng = np.random.default_rng(11)
    A, b = random_polygon(rng)
    p = polytope_from_halfspaces(A, b)
    slack = p.b[None, :] - p.vertices @ p.A.T
    assert np.all(np.abs(slack).min(axis=0) <= 1e-9)


def test_convex_combinations_are_contained():
    rng = np.random.default_rng(5)
    A, b = random_polygon(rng)
    p = polytope_from_halfspaces(A, b)
    w = rng.dirichlet(np.ones(len(p.vertices)), size=200)
    X = w @ p.vertices
    assert np.all(X @ p.A.T <= p.b + 1e-9)


def test_distances_unit_square():
    fd = FaceDistance.of(polytope_from_halfspaces(SQUARE_A, SQUARE_B))
    assert np.allclose(distance_to_faces(fd, [0, 0]), 1.0)
    d = distance_to_faces(fd, [1.0, 0.0])
    assert d[0] == pytest.approx(0.0, abs=1e-15)


def test_distances_triangle_point_to_line():
    fd = FaceDistance.of(polytope_from_halfspaces(TRIANGLE_A, TRIANGLE_B))
    d = distance_to_faces(fd, [0.25, 0.25])
    # point-to-line formula |a.x - b| / |a|
    expected = [abs(a @ [0.25, 0.25] - bb) / np.linalg.norm(a) for a, bb in zip(TRIANGLE_A, TRIANGLE_B)]
    assert np.allclose(d, expected)
    assert d[2] == pytest.approx(0.5 / math.sqrt(2))


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_distance_sign_matches_face_satisfaction(x, y):
    p = polytope_from_halfspaces(TRIANGLE_A, TRIANGLE_B)
    d = distance_to_faces(FaceDistance.of(p), [x, y])
    sat = p.A @ [x, y] <= p.b
    assert np.all((d >= 0) == sat)


def test_gamma_unit_square():
    p = polytope_from_halfspaces(SQUARE_A, SQUARE_B)
    # largest face distance over the vertices is 2 (the opposite side)
    d = distance_to_faces(FaceDistance.of(p), p.vertices)
    assert gamma_for(p) == pytest.approx(d.max() / (math.e - 1))
    assert gamma_for(p) == pytest.approx(2 / (math.e - 1))


def test_gamma_scales_with_size():
    small = polytope_from_halfspaces(SQUARE_A, SQUARE_B)
    big = polytope_from_halfspaces(SQUARE_A, 2 * SQUARE_B)
    assert gamma_for(big) == pytest.approx(2 * gamma_for(small))


def test_eta_reference_values():
    p = polytope_from_halfspaces(SQUARE_A, SQUARE_B)
    rb = risk_budget(p)
    g = rb.gamma
    # face 0 is x <= 1; distance from (1 - d, 0) is d
    assert eta(rb, [1.0, 0.0], 0) == 0.0
    assert eta(rb, [1.0 - g, 0.0], 0) == pytest.approx(math.log(2))
    assert eta(rb, [1.0 - g * (math.e - 1), 0.0], 0) == pytest.approx(1.0)


def test_eta_outside_raises():
    rb = risk_budget(polytope_from_halfspaces(SQUARE_A, SQUARE_B))
    with pytest.raises(NegativeDistance):
        eta(rb, [1.5, 0.0], 0)


def test_eta_bounded_by_one_everywhere_inside():
    rng = np.random.default_rng(0)
    A, b = random_polygon(rng)
    p = polytope_from_halfspaces(A, b)
    rb = risk_budget(p)
    w = rng.dirichlet(np.ones(len(p.vertices)), size=300)
    for x in np.vstack([w @ p.vertices, p.vertices]):
        for i in range(p.n_faces):
            assert 0.0 <= eta(rb, x, i) <= 1.0 + 1e-12
