"""Closed-loop stochastic simulation with violation accounting and Monte Carlo checks.

Dynamics are integrated with explicit Euler, ``x+ = x + dt (A x + B u)``, and
the controller sees a noisy state, ``u = K (x - x_ref + theta)``.  The noise
``theta ~ N(0, sigma^2 Sigma(x))`` is redrawn once per step and held over it.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .chance import AffineRandomScalar, NoiseModel, monte_carlo_probability, psd_sqrt
from .errors import NonFinite
from .geometry import FaceDistance, Polytope, distance_to_faces, risk_budget
from .systems import BarrierFace, LinearSystem, cbf_coefficients, common_relative_degree, position_of


def worker_count(requested: Optional[int] = None) -> int:
    """Number of worker threads, capped by the ``CSS_THREADS`` environment variable."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("CSS_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 20.0
    sigma_scale: float = 0.0
    seed: int = 0
    runs: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if self.sigma_scale < 0:
            raise ValueError("sigma_scale must be nonnegative")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    violation_events: list = field(default_factory=list)
    exit_event: Optional[tuple] = None

    @property
    def violated(self) -> bool:
        return bool(self.violation_events)


def _watched_faces(polytope: Polytope, faces, exit_face):
    if faces is None:
        faces = polytope.barrier_faces()
    if exit_face is not None:
        faces = [i for i in faces if polytope.face_ids[i] != exit_face]
    return list(faces)


def rollout(
    sys: LinearSystem,
    K,
    x0,
    polytope: Polytope,
    noise: NoiseModel,
    cfg: SimConfig,
    x_ref=None,
    exit_face: Optional[int] = None,
    faces: Optional[Sequence[int]] = None,
    run_index: int = 0,
) -> Trajectory:
    """One Euler rollout; deterministic for a fixed ``(cfg.seed, run_index)``.

    ``faces`` are stored row indices watched for violations (default: the
    barrier faces).  With ``exit_face`` (an original face id) the run stops
    the first time that face is crossed and the crossing is recorded.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x = np.asarray(x0, dtype=float).copy()
    if not polytope.contains(x):
        raise ValueError("initial state lies outside the polytope")
    x_ref = np.zeros(sys.n_x) if x_ref is None else np.asarray(x_ref, dtype=float)
    watched = _watched_faces(polytope, faces, exit_face)
    exit_row = polytope.face_index(exit_face) if exit_face is not None else None
    fd = FaceDistance.of(polytope)
    rng = np.random.default_rng(cfg.seed + run_index)
    sigma = cfg.sigma_scale
    const_root = psd_sqrt(noise.base) if noise.is_constant else None

    n = cfg.steps
    times = [0.0]
    states = [x.copy()]
    inputs = []
    events = []
    outside = np.zeros(len(watched), dtype=bool)
    exit_event = None
    for k in range(n):
        if sigma > 0:
            root = const_root if const_root is not None else psd_sqrt(noise.covariance(x))
            theta = sigma * (root @ rng.standard_normal(sys.n_x))
        else:
            theta = np.zeros(sys.n_x)
        u = K @ (x - x_ref + theta)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + cfg.dt * (sys.A @ x + sys.B @ u)
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"state diverged at t = {(k + 1) * cfg.dt:.3f}")
        t = (k + 1) * cfg.dt
        times.append(t)
        states.append(x.copy())
        inputs.append(u)
        d = distance_to_faces(fd, x)
        now_out = d[watched] < 0
        # record the onset of each excursion, not every step spent outside
        for j in np.flatnonzero(now_out & ~outside):
            events.append((polytope.face_ids[watched[j]], t))
        outside = now_out
        if exit_row is not None and d[exit_row] < 0:
            exit_event = (exit_face, t)
            break
    inputs.append(K @ (x - x_ref))
    return Trajectory(np.array(times), np.array(states), np.array(inputs), events, exit_event)


def rollout_batch(sys, K, x0s, polytope, noise, cfg: SimConfig, workers: Optional[int] = None, **kw):
    """``cfg.runs`` rollouts per initial state; run ``j`` uses seed ``cfg.seed + j``."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    jobs = [(x0, j) for x0 in x0s for j in range(cfg.runs)]

    def one(job):
        x0, j = job
        return rollout(sys, K, x0, polytope, noise, cfg, run_index=j, **kw)

    n = worker_count(workers)
    if n == 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, jobs))


@dataclass(frozen=True)
class ViolationStats:
    violation_run_fraction: float
    per_face_counts: dict
    mean_exit_time: float
    exit_fraction: float

    def to_json(self) -> dict:
        return {
            "violation_run_fraction": self.violation_run_fraction,
            "per_face_counts": {str(k): v for k, v in sorted(self.per_face_counts.items())},
            "mean_exit_time": None if math.isnan(self.mean_exit_time) else self.mean_exit_time,
            "exit_fraction": self.exit_fraction,
        }


def violation_stats(trajectories: Sequence[Trajectory]) -> ViolationStats:
    if not trajectories:
        raise ValueError("need at least one trajectory")
    counts: dict = {}
    for tr in trajectories:
        for face, _ in tr.violation_events:
            counts[face] = counts.get(face, 0) + 1
    frac = sum(tr.violated for tr in trajectories) / len(trajectories)
    exits = [tr.exit_event[1] for tr in trajectories if tr.exit_event is not None]
    mean_exit = float(np.mean(exits)) if len(exits) == len(trajectories) else float("nan")
    return ViolationStats(frac, counts, mean_exit, len(exits) / len(trajectories))


def lyapunov_values(traj: Trajectory, P, x_ref=None) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    e = traj.states - (0.0 if x_ref is None else np.asarray(x_ref, dtype=float))
    return np.einsum("ki,ij,kj->k", e, P, e)


def trajectory_to_csv(traj: Trajectory, polytope: Polytope, path) -> None:
    """Columns: ``t``, states, inputs, then the signed distance to every face."""
    fd = FaceDistance.of(polytope)
    nx, nu = traj.states.shape[1], traj.inputs.shape[1]
    header = ["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
    header += [f"d{fid}" for fid in polytope.face_ids]
    d = distance_to_faces(fd, traj.states)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj.times)):
            row = [traj.times[k], *traj.states[k], *traj.inputs[k], *d[k]]
            w.writerow([repr(float(v)) for v in row])


# -- invariant set -------------------------------------------------------------

@dataclass
class InvariantSet:
    xs: np.ndarray           # cell-centre x coordinates
    ys: np.ndarray           # cell-centre y coordinates
    inside: np.ndarray       # (ny, nx) cell centre lies in the polygon
    member: np.ndarray       # (ny, nx) cell belongs to the invariant set
    area_fraction: float

    @property
    def cell_size(self) -> tuple[float, float]:
        return float(self.xs[1] - self.xs[0]), float(self.ys[1] - self.ys[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "inside", "member"])
            for j, y in enumerate(self.ys):
                for i, x in enumerate(self.xs):
                    w.writerow([repr(float(x)), repr(float(y)), int(self.inside[j, i]), int(self.member[j, i])])


def invariant_set_estimate(
    sys: LinearSystem,
    K,
    polytope: Polytope,
    x_ref,
    grid_resolution: int = 100,
    threshold: float = 0.05,
    dt: float = 0.01,
    horizon: float = 20.0,
    faces: Optional[Sequence[int]] = None,
) -> InvariantSet:
    """Noiseless zero-velocity rollouts from a grid over the position polygon.

    Expects the four-state double-integrator layout ``[x, xdot, y, ydot]``.
    A cell is a member when its rollout never leaves the watched faces and
    ends within ``threshold`` of the target position.
    """
    if sys.n_x != 4:
        raise ValueError("invariant-set estimation expects the 4-state planar layout")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x_ref = np.asarray(x_ref, dtype=float)
    pos_v = position_of(polytope.vertices)
    lo, hi = pos_v.min(axis=0), pos_v.max(axis=0)
    ex = (hi - lo) / grid_resolution
    xs = lo[0] + ex[0] * (np.arange(grid_resolution) + 0.5)
    ys = lo[1] + ex[1] * (np.arange(grid_resolution) + 0.5)
    GX, GY = np.meshgrid(xs, ys)
    X = np.zeros((GX.size, 4))
    X[:, 0], X[:, 2] = GX.ravel(), GY.ravel()
    watched = _watched_faces(polytope, faces, None)
    fd = FaceDistance.of(polytope)
    inside = np.all(distance_to_faces(fd, X)[:, watched] >= 0, axis=1)

    Acl = sys.A + sys.B @ K
    drive = sys.B @ K @ x_ref
    Z = X[inside]
    ok = np.ones(len(Z), dtype=bool)
    for _ in range(int(round(horizon / dt))):
        Z = Z + dt * (Z @ Acl.T - drive)
        ok &= np.all(distance_to_faces(fd, Z)[:, watched] >= 0, axis=1)
    if not np.all(np.isfinite(Z[ok])):
        raise NonFinite("noiseless rollout diverged")
    close = np.linalg.norm(position_of(Z) - position_of(x_ref), axis=1) <= threshold
    member = np.zeros(GX.size, dtype=bool)
    member[np.flatnonzero(inside)] = ok & close
    n_in = int(inside.sum())
    frac = float(member.sum() / n_in) if n_in else 0.0
    shape = GX.shape
    return InvariantSet(xs, ys, inside.reshape(shape), member.reshape(shape), frac)


# -- chance-constraint field check ----------------------------------------------

@dataclass
class FieldReport:
    points: np.ndarray
    faces: list                 # original face ids, one column each
    estimates: np.ndarray       # (n_points, n_faces) empirical violation probability
    halfwidths: np.ndarray
    budgets: np.ndarray         # eta_i(x)
    flagged: list               # (point index, face id) pairs over budget

    @property
    def passed(self) -> bool:
        return not self.flagged

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "faces": self.faces,
            "estimates": self.estimates.tolist(),
            "halfwidths": self.halfwidths.tolist(),
            "budgets": self.budgets.tolist(),
            "flagged": [[int(i), int(f)] for i, f in self.flagged],
            "passed": self.passed,
        }


def verify_chance_field(
    sys: LinearSystem,
    K,
    polytope: Polytope,
    noise,
    sample_points,
    samples_per_point: int = 10_000,
    seed: int = 0,
    alpha=(1.0, 1.0),
    x_ref=None,
    faces: Optional[Sequence[int]] = None,
    sigma_scale: float = 1.0,
) -> FieldReport:
    """Empirical violation probability of every barrier inequality at each point.

    For face ``i`` the inequality is ``scriptA x~ + M K (x~ + theta) + alpha_0 b~ >= 0``
    in controller coordinates ``x~ = x - x_ref``.  ``noise`` is a
    :class:`NoiseModel` or a callable returning ``Sigma(x)`` in original
    coordinates.  A point is flagged when the estimate exceeds
    ``eta_i(x) + 3`` Wilson half-widths.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x_ref = np.zeros(sys.n_x) if x_ref is None else np.asarray(x_ref, dtype=float)
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    shifted = polytope.shifted(x_ref)
    faces = polytope.barrier_faces() if faces is None else list(faces)
    rb = risk_budget(shifted, faces)
    r = common_relative_degree(sys, [-shifted.A[i] for i in faces])
    cov_of = noise if callable(noise) else noise.covariance
    s2 = float(sigma_scale) ** 2
    est = np.zeros((len(pts), len(faces)))
    hw = np.zeros_like(est)
    bud = np.zeros_like(est)
    flagged = []
    for j, i in enumerate(faces):
        face = BarrierFace.from_polytope(shifted, i, alpha)
        script_a, M = cbf_coefficients(sys, face, r)
        gain = M @ K
        for p, x in enumerate(pts):
            xt = x - x_ref
            d = float(distance_to_faces(rb.distance, xt)[i])
            bud[p, j] = math.log(max(d, 0.0) / rb.gamma + 1.0)
            # violation event g < 0 written as P(f >= 0) with f = -g
            f = AffineRandomScalar(-gain, -(script_a @ xt) - face.alpha[0] * face.offset)
            cov = NoiseModel(s2 * np.asarray(cov_of(x), dtype=float))
            est[p, j], hw[p, j] = monte_carlo_probability(f, xt, cov, samples_per_point, seed + p)
            if est[p, j] > bud[p, j] + 3.0 * hw[p, j]:
                flagged.append((p, polytope.face_ids[i]))
    return FieldReport(pts, [polytope.face_ids[i] for i in faces], est, hw, bud, flagged)
