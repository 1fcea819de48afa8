"""LTI dynamics and the Lie-derivative coefficients of affine barriers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import MixedRelativeDegree, NoRelativeDegree
from .geometry import Polytope, polytope_from_halfspaces

REL_DEGREE_TOL = 1e-12


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise ValueError(f"B shape {B.shape} incompatible with A {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K) -> np.ndarray:
        return self.A + self.B @ np.asarray(K, dtype=float)


@dataclass(frozen=True)
class BarrierFace:
    """Affine barrier ``h(x) = row @ x + offset`` with ECBF gains ``alpha``."""

    row: np.ndarray
    offset: float
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row", np.asarray(self.row, dtype=float).ravel())
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).ravel())
        if np.any(self.alpha < 0):
            raise ValueError("ECBF gains must be nonnegative")

    @classmethod
    def from_polytope(cls, p: Polytope, face: int, alpha) -> "BarrierFace":
        return cls(row=-p.A[face], offset=float(p.b[face]), alpha=alpha)

    def value(self, x) -> np.ndarray:
        return np.asarray(x) @ self.row + self.offset


@dataclass(frozen=True)
class ExitFace:
    """Path Lyapunov function ``V(x) = normal @ x + offset``, zero on the exit face."""

    normal: np.ndarray
    offset: float
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).ravel())
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())

    @classmethod
    def from_polytope(cls, p: Polytope, face: int, beta) -> "ExitFace":
        return cls(normal=-p.A[face], offset=float(p.b[face]), beta=beta)

    def value(self, x) -> np.ndarray:
        return np.asarray(x) @ self.normal + self.offset


def relative_degree(sys: LinearSystem, row) -> int:
    """Smallest r with ``row A^(r-1) B != 0``."""
    row = np.asarray(row, dtype=float).ravel()
    scale = np.linalg.norm(row)
    if scale == 0:
        raise ValueError("row must be nonzero")
    v = row / scale
    for i in range(sys.n_x):
        if np.linalg.norm(v @ sys.B) > REL_DEGREE_TOL:
            return i + 1
        v = v @ sys.A
    raise NoRelativeDegree("input never appears in the derivatives of this function")


def common_relative_degree(sys: LinearSystem, rows: Sequence[np.ndarray]) -> int:
    degrees = {relative_degree(sys, r) for r in rows}
    if len(degrees) != 1:
        raise MixedRelativeDegree(f"faces have relative degrees {sorted(degrees)}; one shared r is required")
    return degrees.pop()


def _lie_coefficients(sys: LinearSystem, row, gains, r: int) -> tuple[np.ndarray, np.ndarray]:
    row = np.asarray(row, dtype=float).ravel()
    gains = np.asarray(gains, dtype=float).ravel()
    if gains.size != r:
        raise ValueError(f"need {r} gains, got {gains.size}")
    powers = [row]
    for _ in range(r):
        powers.append(powers[-1] @ sys.A)
    script_a = powers[r] + sum(g * p for g, p in zip(gains, powers[:r]))
    M = powers[r - 1] @ sys.B
    return script_a, M


def cbf_coefficients(sys: LinearSystem, face: BarrierFace, r: Optional[int] = None):
    """``(scriptA, M)`` so the ECBF expression reads ``scriptA x + M u + alpha_0 offset``."""
    if r is None:
        r = relative_degree(sys, face.row)
    return _lie_coefficients(sys, face.row, face.alpha, r)


def clf_path_coefficients(sys: LinearSystem, exit: ExitFace, r: Optional[int] = None):
    if r is None:
        r = relative_degree(sys, exit.normal)
    return _lie_coefficients(sys, exit.normal, exit.beta, r)


def double_integrator_2d() -> LinearSystem:
    """Planar point mass with state ``[x, xdot, y, ydot]`` and acceleration inputs."""
    A = np.zeros((4, 4))
    A[0, 1] = A[2, 3] = 1.0
    B = np.zeros((4, 2))
    B[1, 0] = B[3, 1] = 1.0
    return LinearSystem(A, B)


def lift_position_constraints(polygon: Polytope, vbound: float, velocity_barriers: bool = False) -> Polytope:
    """Embed a position polygon into the 4D state space with a velocity box.

    Position rows become ``[a1, 0, a2, 0]`` and keep their barrier tag; the
    four velocity rows (ids -1 to -4) are tagged auxiliary unless
    ``velocity_barriers`` is set.  Face ids of the position rows are
    preserved so exit-face indices stay valid after lifting.
    """
    if polygon.dim != 2:
        raise ValueError("expected a 2D position polygon")
    n_pos = polygon.n_faces
    A = np.zeros((n_pos + 4, 4))
    A[:n_pos, 0] = polygon.A[:, 0]
    A[:n_pos, 2] = polygon.A[:, 1]
    b = np.concatenate([polygon.b, np.full(4, float(vbound))])
    A[n_pos, 1], A[n_pos + 1, 1] = 1.0, -1.0
    A[n_pos + 2, 3], A[n_pos + 3, 3] = 1.0, -1.0
    kinds = list(polygon.face_kinds) + ["barrier" if velocity_barriers else "auxiliary"] * 4
    lifted = polytope_from_halfspaces(A, b, kinds=kinds)
    ids = [polygon.face_ids[i] if i < n_pos else -(i - n_pos + 1) for i in lifted.face_ids]
    object.__setattr__(lifted, "face_ids", tuple(ids))
    return lifted


def position_of(x) -> np.ndarray:
    """Planar position ``(x, y)`` from double-integrator states."""
    x = np.asarray(x)
    return x[..., [0, 2]]
