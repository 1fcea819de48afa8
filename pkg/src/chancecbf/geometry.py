"""Polytopes in H-representation and the boundary risk budget defined on them.

A polytope is stored as ``A x <= b``.  The barrier attached to face ``i`` is
``h_i(x) = b_i - A_i x`` so it is nonnegative inside and vanishes on the face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import Degenerate, Empty, NegativeDistance, Unbounded

VERTEX_TOL = 1e-9


@dataclass(frozen=True)
class Polytope:
    """Bounded polytope ``{x : A x <= b}`` with its cached vertex list.

    ``face_ids`` maps each stored row back to its index in the halfspace list
    the polytope was built from, so redundant rows can be dropped without
    losing track of which barrier is which.  ``face_kinds`` tags rows as
    ``"barrier"`` (participates in the CBF family) or ``"auxiliary"``.
    """

    A: np.ndarray
    b: np.ndarray
    vertices: np.ndarray
    face_ids: tuple = ()
    face_kinds: tuple = ()

    def __post_init__(self):
        for arr in (self.A, self.b, self.vertices):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_faces(self) -> int:
        return self.A.shape[0]

    def barrier_faces(self) -> list[int]:
        return [i for i, k in enumerate(self.face_kinds) if k == "barrier"]

    def contains(self, x, tol: float = VERTEX_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(self.A @ x <= self.b + tol))

    def face_index(self, original_id: int) -> int:
        """Position of the row that was ``original_id`` in the input list."""
        try:
            return self.face_ids.index(original_id)
        except ValueError:
            raise KeyError(f"face {original_id} was removed as redundant") from None

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        return chebyshev_center(self.A, self.b)

    def diameter(self) -> float:
        V = self.vertices
        diff = V[:, None, :] - V[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1)).max())

    def shifted(self, origin) -> "Polytope":
        """Same set expressed in coordinates centred at ``origin``."""
        origin = np.asarray(origin, dtype=float)
        return Polytope(
            A=self.A.copy(),
            b=self.b - self.A @ origin,
            vertices=self.vertices - origin,
            face_ids=self.face_ids,
            face_kinds=self.face_kinds,
        )

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}


def chebyshev_center(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Centre and radius of the largest inscribed ball (LP)."""
    m, n = A.shape
    norms = np.linalg.norm(A, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * n + [(0, None)], method="highs")
    if res.status == 2:
        raise Empty("halfspace system is infeasible")
    if res.status == 3:
        raise Unbounded("inscribed ball radius is unbounded")
    if res.status != 0:
        raise Empty(f"Chebyshev-centre LP failed: {res.message}")
    return res.x[:n], float(res.x[-1])


def _check_bounded(A: np.ndarray, b: np.ndarray) -> None:
    n = A.shape[1]
    for j in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[j] = -sign
            res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * n, method="highs")
            if res.status == 2:
                raise Empty("halfspace system is infeasible")
            if res.status == 3:
                raise Unbounded(f"polytope is unbounded along {'+' if sign > 0 else '-'}x{j}")


def _vertex_candidates(A: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    m, n = A.shape
    found: list[np.ndarray] = []
    for rows in combinations(range(m), n):
        sub = A[list(rows)]
        if np.linalg.cond(sub) > 1e12:
            continue
        x = np.linalg.solve(sub, b[list(rows)])
        if np.all(A @ x <= b + tol * (1.0 + np.abs(b))):
            found.append(x)
    return _dedupe(found, tol)


def _dedupe(points: Sequence[np.ndarray], tol: float) -> np.ndarray:
    unique: list[np.ndarray] = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol * (1.0 + np.max(np.abs(q))) for q in unique):
            unique.append(p)
    if not unique:
        return np.zeros((0, 0))
    return np.array(unique)


def enumerate_vertices(p_or_A, b=None, tol: float = VERTEX_TOL) -> np.ndarray:
    """All vertices of ``{A x <= b}`` by exhaustive active-set solves.

    Accepts either a :class:`Polytope` or the raw ``(A, b)`` pair.  Every
    ``n``-subset of faces with a well-conditioned matrix is solved and the
    intersection kept if it satisfies all other inequalities.
    """
    if isinstance(p_or_A, Polytope):
        A, b = p_or_A.A, p_or_A.b
    else:
        A = np.atleast_2d(np.asarray(p_or_A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
    _check_bounded(A, b)
    V = _vertex_candidates(A, b, tol)
    if V.size == 0:
        raise Degenerate("no vertices found")
    return V


def _facet_mask(A: np.ndarray, b: np.ndarray, V: np.ndarray, tol: float) -> np.ndarray:
    """True for rows whose tight vertices span an (n-1)-dimensional face."""
    m, n = A.shape
    keep = np.zeros(m, dtype=bool)
    seen: list[tuple[np.ndarray, float]] = []
    for i in range(m):
        norm = np.linalg.norm(A[i])
        gap = (b[i] - V @ A[i]) / norm
        tight = V[np.abs(gap) <= tol * (1.0 + abs(b[i]) / norm)]
        if len(tight) < n:
            continue
        rank = np.linalg.matrix_rank(tight[1:] - tight[0], tol=1e-8) if len(tight) > 1 else 0
        if rank < n - 1:
            continue
        unit = (A[i] / norm, b[i] / norm)
        if any(np.allclose(unit[0], u) and abs(unit[1] - c) <= tol for u, c in seen):
            continue
        seen.append(unit)
        keep[i] = True
    return keep


def polytope_from_halfspaces(A, b, kinds: Optional[Sequence[str]] = None) -> Polytope:
    """Build a bounded polytope with its vertices; redundant rows are dropped."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
    if np.any(np.linalg.norm(A, axis=1) == 0):
        raise ValueError("zero row in A")
    kinds = tuple(kinds) if kinds is not None else ("barrier",) * A.shape[0]
    _check_bounded(A, b)
    _, radius = chebyshev_center(A, b)
    if radius <= VERTEX_TOL:
        raise Degenerate("polytope has empty interior")
    V = _vertex_candidates(A, b, VERTEX_TOL)
    keep = _facet_mask(A, b, V, VERTEX_TOL)
    idx = np.flatnonzero(keep)
    return Polytope(
        A=A[idx].copy(),
        b=b[idx].copy(),
        vertices=V,
        face_ids=tuple(int(i) for i in idx),
        face_kinds=tuple(kinds[i] for i in idx),
    )


def polytope_from_json(obj: dict, kinds=None) -> Polytope:
    return polytope_from_halfspaces(obj["A"], obj["b"], kinds=kinds)


@dataclass(frozen=True)
class FaceDistance:
    """Signed Euclidean distances ``d(x) = scaled_normals @ x + scaled_offsets``."""

    scaled_normals: np.ndarray
    scaled_offsets: np.ndarray

    @classmethod
    def of(cls, p: Polytope) -> "FaceDistance":
        lam = 1.0 / np.linalg.norm(p.A, axis=1)
        return cls(scaled_normals=-p.A * lam[:, None], scaled_offsets=p.b * lam)

    def __call__(self, x) -> np.ndarray:
        return distance_to_faces(self, x)


def distance_to_faces(fd: FaceDistance, x) -> np.ndarray:
    """Per-face distance; works on a single point or a stack of points (last axis)."""
    x = np.asarray(x, dtype=float)
    return x @ fd.scaled_normals.T + fd.scaled_offsets


@dataclass(frozen=True)
class RiskBudget:
    gamma: float
    distance: FaceDistance = field(repr=False)


def eta(rb: RiskBudget, x, face: int) -> float:
    """Allowed violation probability ``log(d_face(x)/gamma + 1)``."""
    d = float(distance_to_faces(rb.distance, x)[face])
    if d < -1e-12:
        raise NegativeDistance(f"point lies {-d:.3g} outside face {face}")
    return math.log(max(d, 0.0) / rb.gamma + 1.0)


def gamma_for(p: Polytope, faces: Optional[Sequence[int]] = None) -> float:
    """Smallest gamma keeping eta <= 1 on the polytope.

    ``faces`` restricts the maximum to a subset of rows (the barrier family);
    distances are affine so the maximum over the cell sits at a vertex, the
    Chebyshev centre is included only as a cheap extra sample.
    """
    fd = FaceDistance.of(p)
    centre, _ = p.chebyshev_center()
    pts = np.vstack([p.vertices, centre])
    d = distance_to_faces(fd, pts)
    if faces is not None:
        d = d[:, list(faces)]
    return float(d.max()) / (math.e - 1.0)


def risk_budget(p: Polytope, faces: Optional[Sequence[int]] = None) -> RiskBudget:
    return RiskBudget(gamma=gamma_for(p, faces), distance=FaceDistance.of(p))
