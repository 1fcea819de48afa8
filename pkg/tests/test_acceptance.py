"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed in the pytest terminal
summary) and then asserts the same condition.
"""

import itertools
import time

import mpmath as mp
import numpy as np
import pytest

from chancecbf.chance import AffineRandomScalar, NoiseModel, certified_mean_interval, relax_chance_ge, wilson_halfwidth
from chancecbf.errors import GeometryError
from chancecbf.geometry import (
    FaceDistance,
    distance_to_faces,
    enumerate_vertices,
    eta,
    polytope_from_halfspaces,
    risk_budget,
)
from chancecbf.scenario import from_dict, synthesize
from chancecbf.simulate import (
    SimConfig,
    invariant_set_estimate,
    lyapunov_values,
    rollout,
    rollout_batch,
    violation_stats,
)
from chancecbf.solvers import INFEASIBLE, OPTIMAL, find_P, solve_qcqp, verify_lyapunov
from chancecbf.systems import ExitFace, position_of, relative_degree

from conftest import fixture_dict, random_polygon
from test_solvers import planted_problem, scalar_interval_problem, single_square_problem


def position_polygon(raw):
    return polytope_from_halfspaces(raw["polytope"]["A"], raw["polytope"]["b"])


# 1 ---------------------------------------------------------------------------

def test_chebyshev_soundness_sweep(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    bad, worst = 0, -np.inf
    n_samples = 100_000
    for _ in range(100):
        n = int(rng.integers(1, 5))
        L = rng.normal(size=(n, n))
        Sigma = L @ L.T * rng.uniform(0.05, 2.0)
        b = rng.normal(size=n)
        x = rng.normal(size=n)
        t = rng.uniform(0.2, 3.0)
        eta_ = rng.uniform(0.01, 1.0)
        var = float(b @ Sigma @ b)
        interval = certified_mean_interval(var, t, eta_)
        while interval is None:
            t *= 2.0
            interval = certified_mean_interval(var, t, eta_)
        # half the draws sit on the certificate boundary, where it is tightest
        m = interval[0] if rng.random() < 0.5 else rng.uniform(*interval)
        f = AffineRandomScalar(b, m - b @ x)
        assert relax_chance_ge(f, x, NoiseModel(Sigma), t, eta_) <= 1e-9
        theta = rng.multivariate_normal(np.zeros(n), Sigma, size=n_samples)
        hits = int(np.count_nonzero((x + theta) @ b + f.c >= 0))
        p_hat = hits / n_samples
        worst = max(worst, p_hat - eta_)
        if p_hat > eta_ + 3 * wilson_halfwidth(hits, n_samples):
            bad += 1
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 30
    criterion(1, ok, f"{bad} of 100 certified instances over budget (max p-eta {worst:.4f}), {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_vertex_trick_oracle(criterion):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = -np.inf
    for _ in range(50):
        A, b = random_polygon(rng)
        V = enumerate_vertices(A, b)
        L = rng.normal(size=(2, 2))
        Q = L @ L.T
        g = rng.normal(size=2) * 3
        c0 = rng.normal()

        def q(X):
            return np.einsum("...i,ij,...j->...", X, Q, X) + X @ g + c0

        lo, hi = V.min(axis=0), V.max(axis=0)
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 200), np.linspace(lo[1], hi[1], 200))
        G = np.stack([gx.ravel(), gy.ravel()], axis=1)
        G = G[np.all(G @ A.T <= b + 1e-12, axis=1)]
        worst = max(worst, q(G).max() - q(V).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    criterion(2, ok, f"max(grid max - vertex max) = {worst:.3e} over 50 polygons, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def exact_vertices(A, b):
    """Brute-force oracle: every n-subset of faces intersected in 50-digit arithmetic.

    Double-precision oracles (qhull's dual hull included) drift by more than
    1e-9 on nearly parallel faces, so the reference is computed exactly and
    only rounded at the end.
    """
    n = A.shape[1]
    with mp.workdps(50):
        Am, bm = mp.matrix(A.tolist()), mp.matrix(b.tolist())
        tiny = mp.mpf(10) ** -30
        out = []
        for rows in itertools.combinations(range(A.shape[0]), n):
            M = mp.matrix([[Am[i, j] for j in range(n)] for i in rows])
            if abs(mp.det(M)) < tiny:
                continue
            v = mp.lu_solve(M, mp.matrix([bm[i] for i in rows]))
            if all(mp.fsum(Am[i, j] * v[j] for j in range(n)) - bm[i] <= tiny for i in range(A.shape[0])):
                p = np.array([float(x) for x in v])
                if not any(np.linalg.norm(p - q) <= 1e-7 for q in out):
                    out.append(p)
    return np.array(out)


def random_polytope_3d(rng):
    n = int(rng.integers(6, 13))
    N = rng.normal(size=(n, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    return np.vstack([N, -N[:3]]), rng.uniform(1.0, 3.0, n + 3)


def test_vertex_enumeration_matches_exact_oracle(criterion):
    rng = np.random.default_rng(11)
    checked, mismatches, worst = 0, 0, 0.0
    while checked < 50:
        A, b = random_polygon(rng) if checked % 2 == 0 else random_polytope_3d(rng)
        try:
            ours = enumerate_vertices(A, b)
        except GeometryError:
            continue
        ref = exact_vertices(A, b)
        checked += 1
        if len(ours) != len(ref):
            mismatches += 1
            continue
        dist = max(max(np.linalg.norm(ref - v, axis=1).min() for v in ours),
                   max(np.linalg.norm(ours - v, axis=1).min() for v in ref))
        worst = max(worst, dist)
        mismatches += dist > 1e-9
    ok = mismatches == 0
    criterion(3, ok, f"{mismatches} mismatching sets of 50 (2D and 3D), Hausdorff max {worst:.1e}")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_relative_degree_of_position_faces(eq_scenario, path_scenario, criterion):
    degrees = []
    for scn in (eq_scenario, path_scenario):
        for i in scn.polytope.barrier_faces():
            degrees.append(relative_degree(scn.sys, -scn.polytope.A[i]))
    ok = set(degrees) == {2}
    criterion(4, ok, f"relative degrees over {len(degrees)} position faces: {sorted(set(degrees))}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_equilibrium_noiseless_reproduction(criterion):
    start = time.perf_counter()
    scn = from_dict(fixture_dict("equilibrium_pentagon"))
    res = synthesize(scn)
    tr = rollout(scn.sys, res.K, scn.x0[0], scn.polytope, scn.noise, SimConfig(dt=0.01, horizon=20.0),
                 x_ref=scn.x_ref, faces=scn.watched_faces())
    elapsed = time.perf_counter() - start
    err = float(np.linalg.norm(position_of(tr.states[-1]) - position_of(scn.x_ref)))
    ok = res.status == OPTIMAL and not tr.violated and tr.times[-1] == pytest.approx(20.0) and err <= 0.05 \
        and elapsed < 60
    criterion(5, ok, f"status {res.status}, {len(tr.violation_events)} violations, final error {err:.2e}, "
                     f"{elapsed:.1f}s")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_equilibrium_noise_ordering(eq_scenario, eq_result, criterion):
    fractions = {}
    for sigma in (0.1, 1.0):
        cfg = SimConfig(dt=0.01, horizon=20.0, sigma_scale=sigma, seed=0, runs=50)
        runs = rollout_batch(eq_scenario.sys, eq_result.K, eq_scenario.x0, eq_scenario.polytope,
                             eq_scenario.noise, cfg, x_ref=eq_scenario.x_ref, faces=eq_scenario.watched_faces())
        fractions[sigma] = violation_stats(runs).violation_run_fraction
    ok = fractions[0.1] < fractions[1.0]
    criterion(6, ok, f"violation_run_fraction sigma=0.1: {fractions[0.1]:.2f}, sigma=1: {fractions[1.0]:.2f} "
                     "(50 runs each)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_path_noiseless_reproduction(path_scenario, path_result, criterion):
    scn = path_scenario
    row = scn.polytope.face_index(scn.exit_face)
    V_of = ExitFace.from_polytope(scn.polytope, row, scn.params.beta_V)
    exited, clean, monotone = 0, 0, 0
    for x0 in scn.x0:
        tr = rollout(scn.sys, path_result.K, x0, scn.polytope, scn.noise, SimConfig(dt=0.01, horizon=20.0),
                     exit_face=scn.exit_face, faces=scn.watched_faces())
        exited += tr.exit_event is not None and tr.exit_event[0] == scn.exit_face
        clean += not tr.violated
        V = V_of.value(tr.states)
        monotone += bool(np.all(np.diff(V) < 0))
    n = len(scn.x0)
    ok = path_result.status == OPTIMAL and exited == clean == monotone == n
    criterion(7, ok, f"{exited}/{n} exited through face {scn.exit_face}, {clean}/{n} without violations, "
                     f"{monotone}/{n} with strictly decreasing V")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_lyapunov_certificate(eq_scenario, eq_result, criterion):
    beta = float(eq_scenario.params.beta_V[0])
    P = find_P(eq_scenario.sys, beta)
    max_eig = verify_lyapunov(eq_result.P, eq_scenario.sys.A, eq_scenario.sys.B, eq_result.K, beta)
    asym = float(np.abs(P - P.T).max())
    min_eig = float(np.linalg.eigvalsh(P).min())
    ok = max_eig < 0 and asym <= 1e-10 and min_eig > 0
    criterion(8, ok, f"max_eig {max_eig:.3e}, P asymmetry {asym:.1e}, P min eigenvalue {min_eig:.3f}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_noiseless_lyapunov_decrease(eq_scenario, eq_result, criterion):
    tr = rollout(eq_scenario.sys, eq_result.K, eq_scenario.x0[0], eq_scenario.polytope, eq_scenario.noise,
                 SimConfig(dt=0.01, horizon=20.0), x_ref=eq_scenario.x_ref)
    dV = np.diff(lyapunov_values(tr, eq_result.P, eq_scenario.x_ref))
    ok = bool(np.all(dV <= 1e-9))
    criterion(9, ok, f"max V(x_k+1) - V(x_k) = {dV.max():.3e} over {dV.size} steps")
    assert ok


# 10 --------------------------------------------------------------------------

def test_solver_fixtures(criterion):
    cases = [
        ("interval", scalar_interval_problem(), np.array([1.0])),
        ("single square", single_square_problem(), np.array([0.5, 0.0])),
    ]
    prob, k_star = planted_problem(0)
    cases.append(("planted", prob, k_star))
    errs, kkts, statuses = [], [], []
    for _, prob, k in cases:
        res = solve_qcqp(prob)
        statuses.append(res.status)
        errs.append(float(np.abs(res.K.ravel() - k).max()))
        kkts.append(res.kkt_residual)
    ok = all(s == OPTIMAL for s in statuses) and max(errs) <= 1e-6 and max(kkts) <= 1e-7
    criterion(10, ok, f"max solution error {max(errs):.1e}, max KKT residual {max(kkts):.1e}")
    assert ok


# 11 --------------------------------------------------------------------------

def test_risk_budget_properties(criterion):
    rng = np.random.default_rng(3)
    poly = position_polygon(fixture_dict("equilibrium_pentagon"))
    faces = poly.barrier_faces()
    rb = risk_budget(poly, faces)
    fd = FaceDistance.of(poly)
    V = poly.vertices

    def interior(k):
        return rng.dirichlet(np.ones(len(V)), size=k) @ V

    on_face = 0.0
    for i in faces:
        ends = V[np.abs(distance_to_faces(fd, V)[:, i]) <= 1e-9]
        for s in rng.uniform(0, 1, 20):
            on_face = max(on_face, abs(eta(rb, ends[0] + s * (ends[1] - ends[0]), i)))
    X = interior(1000)
    values = np.array([[eta(rb, x, i) for i in faces] for x in X])
    in_range = bool(np.all((values > 0) & (values <= 1)))
    P, Q = interior(1000), interior(1000)
    gaps = [eta(rb, (p + q) / 2, i) - (eta(rb, p, i) + eta(rb, q, i)) / 2
            for p, q, i in zip(P, Q, rng.integers(0, len(faces), 1000))]
    concave = min(gaps) >= -1e-12
    ok = on_face <= 1e-9 and in_range and concave
    criterion(11, ok, f"max |eta| on faces {on_face:.1e}, interior range [{values.min():.3f}, {values.max():.3f}], "
                      f"min midpoint gap {min(gaps):.1e}")
    assert ok


# 12 --------------------------------------------------------------------------

def test_infeasibility_reproduction(criterion):
    raw = fixture_dict("equilibrium_pentagon")
    assert np.linalg.eigvalsh(np.asarray(raw["noise"]["sigma0"])).min() > 0
    raw["params"]["slack"] = False
    strict = synthesize(from_dict(raw))
    raw["params"]["slack"] = True
    relaxed = synthesize(from_dict(raw))
    positive = int(np.count_nonzero(relaxed.slacks > 0))
    ok = strict.status == INFEASIBLE and relaxed.status == OPTIMAL and positive >= 1
    criterion(12, ok, f"slacks off: {strict.status}; slacks on: {relaxed.status} with {positive} positive slacks")
    assert ok


# 13 --------------------------------------------------------------------------

def test_invariant_set_shape(eq_scenario, eq_result, criterion):
    scn = eq_scenario
    inv = invariant_set_estimate(scn.sys, eq_result.K, scn.polytope, scn.x_ref,
                                 grid_resolution=scn.invariant.grid_resolution, threshold=scn.invariant.threshold,
                                 faces=scn.watched_faces())
    GX, GY = np.meshgrid(inv.xs, inv.ys)
    centres = np.stack([GX, GY], axis=-1)
    poly2 = position_polygon(scn.raw)
    contained = bool(np.all(poly2.A @ centres[inv.member].T <= poly2.b[:, None] + 1e-12))
    target = position_of(scn.x_ref)
    near = np.linalg.norm(centres - target, axis=-1) <= 0.5
    neighbourhood = bool(np.all(inv.member[near]))
    corners = poly2.vertices
    diam = max(np.linalg.norm(p - q) for p in corners for q in corners)
    uncovered = centres[inv.inside & ~inv.member]
    d_corner = np.linalg.norm(uncovered[:, None, :] - corners[None], axis=-1).min(axis=1)
    at_corners = bool(np.all(d_corner <= 0.2 * diam))
    ok = contained and neighbourhood and at_corners
    criterion(13, ok, f"coverage {inv.area_fraction:.3f}, contained {contained}, radius-0.5 neighbourhood "
                      f"{neighbourhood}, {uncovered.shape[0]} uncovered cells all within 0.2*diameter of a corner: "
                      f"{at_corners}")
    assert ok
