"""Compile chance constraints into a convex QCQP over the gain K.

The decision vector is ``kappa = [vec(K), slacks]`` with ``K`` (n_u x n_x)
flattened row-major, so ``K[m, l]`` sits at ``m * n_x + l``.  Every compiled
constraint has the canonical convex form

    sum_j (a_j . kappa + a0_j)^2 + (l . kappa + l0) - s <= 0,

with ``s`` the optional slack attached to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .chance import NoiseModel, psd_sqrt
from .errors import EmptyVertexSet, MissingP
from .geometry import Polytope, risk_budget, distance_to_faces
from .systems import (
    BarrierFace,
    ExitFace,
    LinearSystem,
    cbf_coefficients,
    clf_path_coefficients,
    common_relative_degree,
)


@dataclass(frozen=True)
class AffineForm:
    coeffs: np.ndarray
    offset: float = 0.0

    def __call__(self, kappa) -> float:
        return float(self.coeffs @ kappa + self.offset)

    def padded(self, n: int) -> "AffineForm":
        c = np.zeros(n)
        c[: self.coeffs.size] = self.coeffs
        return AffineForm(c, self.offset)

    def __add__(self, other: "AffineForm") -> "AffineForm":
        return AffineForm(self.coeffs + other.coeffs, self.offset + other.offset)

    def scale(self, s: float) -> "AffineForm":
        return AffineForm(s * self.coeffs, s * self.offset)


@dataclass(frozen=True)
class SquaredAffineConstraint:
    squares: tuple
    linear: AffineForm
    label: tuple = ()
    slack_index: Optional[int] = None
    needs_slack: bool = False

    def value(self, kappa) -> float:
        kappa = np.asarray(kappa, dtype=float)
        g = sum(a(kappa) ** 2 for a in self.squares) + self.linear(kappa)
        if self.slack_index is not None:
            g -= kappa[self.slack_index]
        return g

    def padded(self, n: int) -> "SquaredAffineConstraint":
        return SquaredAffineConstraint(
            squares=tuple(a.padded(n) for a in self.squares),
            linear=self.linear.padded(n),
            label=self.label,
            slack_index=self.slack_index,
            needs_slack=self.needs_slack,
        )

    def with_slack(self, index: int) -> "SquaredAffineConstraint":
        return SquaredAffineConstraint(self.squares, self.linear, self.label, index, self.needs_slack)


@dataclass(frozen=True)
class PsdBlock:
    """Affine matrix map ``F(kappa) = F0 + sum_p kappa_p F[p]`` required to be ``>= eps I``."""

    F0: np.ndarray
    F: np.ndarray
    eps: float = 1e-6
    label: str = ""

    def __call__(self, kappa) -> np.ndarray:
        kappa = np.asarray(kappa, dtype=float)
        return self.F0 + np.tensordot(kappa[: self.F.shape[0]], self.F, axes=1)

    def padded(self, n: int) -> "PsdBlock":
        F = np.zeros((n,) + self.F0.shape)
        F[: self.F.shape[0]] = self.F
        return PsdBlock(self.F0, F, self.eps, self.label)


@dataclass
class QcqpProblem:
    """``min ||K||_F^2 + rho * sum(slacks)`` subject to compiled constraints and PSD blocks."""

    constraints: list
    psd_blocks: list
    K_shape: tuple
    n_slack: int = 0
    rho: float = 1e3

    @property
    def n_k(self) -> int:
        return self.K_shape[0] * self.K_shape[1]

    @property
    def n_decision(self) -> int:
        return self.n_k + self.n_slack

    def objective_terms(self) -> tuple[np.ndarray, np.ndarray]:
        """Hessian and linear term of the objective ``0.5 k'Hk + c'k``."""
        n = self.n_decision
        H = np.zeros((n, n))
        H[: self.n_k, : self.n_k] = 2.0 * np.eye(self.n_k)
        c = np.zeros(n)
        c[self.n_k:] = self.rho
        return H, c

    def objective(self, kappa) -> float:
        kappa = np.asarray(kappa, dtype=float)
        return float(kappa[: self.n_k] @ kappa[: self.n_k] + self.rho * kappa[self.n_k:].sum())

    def residuals(self, kappa) -> np.ndarray:
        return np.array([c.value(kappa) for c in self.constraints])

    def unpack(self, kappa) -> tuple[np.ndarray, np.ndarray]:
        kappa = np.asarray(kappa, dtype=float)
        return kappa[: self.n_k].reshape(self.K_shape), kappa[self.n_k:]

    def pack(self, K, slacks=None) -> np.ndarray:
        s = np.zeros(self.n_slack) if slacks is None else np.asarray(slacks, dtype=float)
        return np.concatenate([np.asarray(K, dtype=float).ravel(), s])

    def to_json(self) -> dict:
        def form(a):
            return {"coeffs": a.coeffs.tolist(), "offset": a.offset}

        return {
            "K_shape": list(self.K_shape),
            "n_slack": self.n_slack,
            "rho": self.rho,
            "constraints": [
                {
                    "label": list(c.label),
                    "squares": [form(a) for a in c.squares],
                    "linear": form(c.linear),
                    "slack_index": c.slack_index,
                }
                for c in self.constraints
            ],
            "psd_blocks": [
                {"label": b.label, "F0": b.F0.tolist(), "F": b.F.tolist(), "eps": b.eps}
                for b in self.psd_blocks
            ],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


# -- K-affine building blocks -------------------------------------------------

def _w_K_x(w, x, offset: float = 0.0) -> AffineForm:
    """Scalar ``w @ K @ x + offset`` as a form over vec(K)."""
    return AffineForm(np.outer(w, x).ravel(), float(offset))


def _noise_rows(w, cov: np.ndarray, scale: float = 1.0) -> tuple:
    """Rows of ``scale * Sigma^(1/2) K' w``; their squares sum to ``scale^2 w K Sigma K' w``."""
    w = np.asarray(w, dtype=float).ravel()
    if not np.any(w) or not np.any(cov):
        return ()
    S = psd_sqrt(cov)
    rows = []
    for j in range(S.shape[0]):
        if np.any(S[j]):
            rows.append(AffineForm(scale * np.outer(w, S[j]).ravel(), 0.0))
    return tuple(rows)


def _gain_row(script_a, M, x_k) -> AffineForm:
    """``(scriptA + M K) x_k``."""
    return _w_K_x(M, x_k, float(np.asarray(script_a) @ x_k))


def compile_cbf(
    face: BarrierFace,
    x_k,
    coefficients,
    sigma: np.ndarray,
    t: float,
    eta_k: float,
    label: tuple = (),
) -> SquaredAffineConstraint:
    """Certificate for ``P(scriptA x + M K (x + theta) + alpha_0 b >= 0) >= 1 - eta``."""
    x_k = np.asarray(x_k, dtype=float)
    script_a, M = coefficients
    alpha_i = face.alpha[0] * face.offset
    kx = _gain_row(script_a, M, x_k)
    noise = _noise_rows(M, sigma)
    linear = kx.scale(2.0 * (alpha_i - t)) + AffineForm(
        np.zeros_like(kx.coeffs), (alpha_i - t) ** 2 - t ** 2 * eta_k
    )
    needs_slack = eta_k <= 0.0 and bool(noise)
    return SquaredAffineConstraint((kx,) + noise, linear, label, None, needs_slack)


def closed_loop_lyapunov_block(sys: LinearSystem, P: np.ndarray, beta: float, eps: float = 1e-6) -> PsdBlock:
    """``Q(K) = -[(A+BK)'P + P(A+BK) + beta P]`` as an affine matrix map of vec(K)."""
    n_x, n_u = sys.n_x, sys.n_u
    Q0 = -(sys.A.T @ P + P @ sys.A + beta * P)
    PB = P @ sys.B
    F = np.zeros((n_u * n_x, n_x, n_x))
    for m in range(n_u):
        for l in range(n_x):
            E = np.zeros((n_x, n_x))
            E[:, l] = PB[:, m]
            F[m * n_x + l] = -(E + E.T)
    return PsdBlock(Q0, F, eps, "lyapunov")


def compile_clf_equilibrium(
    sys: LinearSystem,
    P: np.ndarray,
    x_k,
    sigma: np.ndarray,
    t: float,
    eta_v: float,
    beta: float,
    label: tuple = (),
    literal: bool = False,
    eps: float = 1e-6,
) -> tuple[SquaredAffineConstraint, PsdBlock]:
    """Certificate for ``P(-x'Q(K)x + 2 x'PBK theta <= 0) >= 1 - eta_v`` plus ``Q(K) > 0``.

    ``literal=True`` drops the ``-2 t x'Qx`` cross term, reproducing the
    printed form of the constraint for comparison; that form cannot be
    satisfied for ``eta_v < 1``.
    """
    x_k = np.asarray(x_k, dtype=float)
    block = closed_loop_lyapunov_block(sys, P, beta, eps)
    q = AffineForm(np.tensordot(block.F, x_k, axes=([2], [0])) @ x_k, float(x_k @ block.F0 @ x_k))
    w = sys.B.T @ P @ x_k
    noise = _noise_rows(w, sigma, scale=2.0)
    const = AffineForm(np.zeros_like(q.coeffs), t ** 2 * (1.0 - eta_v))
    linear = const if literal else q.scale(-2.0 * t) + const
    return SquaredAffineConstraint((q,) + noise, linear, label, None, eta_v <= 0 and bool(noise)), block


def compile_clf_path(
    exit: ExitFace,
    x_k,
    coefficients,
    sigma: np.ndarray,
    t: float,
    eta_v: float,
    label: tuple = (),
) -> SquaredAffineConstraint:
    """Certificate for ``P(scriptA_z x + M_z K (x + theta) + beta_0 b_z <= 0) >= 1 - eta_v``."""
    x_k = np.asarray(x_k, dtype=float)
    script_a, M = coefficients
    beta_z = exit.beta[0] * exit.offset
    kx = _gain_row(script_a, M, x_k)
    noise = _noise_rows(M, sigma)
    linear = kx.scale(2.0 * (beta_z + t)) + AffineForm(
        np.zeros_like(kx.coeffs), (beta_z + t) ** 2 - t ** 2 * eta_v
    )
    return SquaredAffineConstraint((kx,) + noise, linear, label, None, eta_v <= 0 and bool(noise))


def compile_actuator(
    a_row,
    b_j: float,
    x_k,
    sigma: np.ndarray,
    t: float,
    eta_u: float,
    label: tuple = (),
) -> SquaredAffineConstraint:
    """Certificate for ``P(a K (x + theta) <= b_j) >= 1 - eta_u``."""
    if t <= 0:
        raise ValueError("t must be positive")
    x_k = np.asarray(x_k, dtype=float)
    a_row = np.asarray(a_row, dtype=float).ravel()
    akx = _w_K_x(a_row, x_k)
    noise = _noise_rows(a_row, sigma)
    linear = akx.scale(2.0 * (t - b_j)) + AffineForm(
        np.zeros_like(akx.coeffs), (t - b_j) ** 2 - t ** 2 * eta_u
    )
    return SquaredAffineConstraint((akx,) + noise, linear, label, None, False)


# -- assembly -----------------------------------------------------------------

@dataclass
class SynthesisParams:
    t: float = 1.0
    alpha: Sequence[float] = (1.0, 1.0)
    beta_V: Sequence[float] = (1.0, 1.0)
    eta_v: float = 0.2
    eta_u: float = 0.1
    rho: float = 1e3
    slack: bool = True
    literal_cclf: bool = False
    conservative_eta: bool = False
    psd_epsilon: float = 1e-6


@dataclass
class SynthesisSetup:
    """Everything the compiler needs, in controller coordinates.

    For the equilibrium task the polytope is already shifted so the target
    sits at the origin; ``noise_origin`` maps vertices back to the frame in
    which ``noise`` is expressed.
    """

    task: str
    sys: LinearSystem
    polytope: Polytope
    noise: NoiseModel
    params: SynthesisParams = field(default_factory=SynthesisParams)
    P: Optional[np.ndarray] = None
    exit_face: Optional[int] = None
    excluded_faces: Sequence[int] = ()
    actuator: Optional[tuple] = None
    noise_origin: Optional[np.ndarray] = None

    def cbf_faces(self) -> list[int]:
        """Stored row indices of the barrier family."""
        out = []
        for i in self.polytope.barrier_faces():
            fid = self.polytope.face_ids[i]
            if self.task == "path" and fid == self.exit_face:
                continue
            if fid in self.excluded_faces:
                continue
            out.append(i)
        return out

    def beta_scalar(self) -> float:
        return float(np.atleast_1d(self.params.beta_V)[0])


def assemble(setup: SynthesisSetup) -> QcqpProblem:
    """Compile one constraint per (family, face/row, vertex) and attach slacks."""
    if setup.task not in ("equilibrium", "path"):
        raise ValueError(f"unknown task {setup.task!r}")
    if setup.task == "equilibrium" and setup.P is None:
        raise MissingP("equilibrium task needs a Lyapunov matrix P")
    poly, sys, prm = setup.polytope, setup.sys, setup.params
    V = poly.vertices
    if V.shape[0] == 0:
        raise EmptyVertexSet("polytope has no vertices")
    origin = np.zeros(sys.n_x) if setup.noise_origin is None else np.asarray(setup.noise_origin)
    covs = [setup.noise.covariance(x + origin) for x in V]
    setup.noise.check_psd(V + origin)

    faces = setup.cbf_faces()
    rb = risk_budget(poly, faces)
    d = distance_to_faces(rb.distance, V)
    etas = np.log(np.clip(d, 0.0, None) / rb.gamma + 1.0)

    constraints: list[SquaredAffineConstraint] = []
    blocks: list[PsdBlock] = []
    rows = [-poly.A[i] for i in faces]
    exit_row = None
    if setup.task == "path":
        if setup.exit_face is None:
            raise ValueError("path task needs exit_face")
        exit_row = poly.face_index(setup.exit_face)
        rows = rows + [-poly.A[exit_row]]
    r = common_relative_degree(sys, rows) if rows else 1

    for i in faces:
        face = BarrierFace.from_polytope(poly, i, prm.alpha)
        coeffs = cbf_coefficients(sys, face, r)
        eta_col = etas[:, i]
        if prm.conservative_eta:
            eta_col = np.full_like(eta_col, eta_col.min())
        for k, x_k in enumerate(V):
            constraints.append(
                compile_cbf(face, x_k, coeffs, covs[k], prm.t, float(eta_col[k]), ("cbf", poly.face_ids[i], k))
            )

    if setup.task == "equilibrium":
        if np.any(np.all(np.abs(V) <= 1e-12, axis=1)):
            raise ValueError("equilibrium point coincides with a polytope vertex")
        beta = setup.beta_scalar()
        for k, x_k in enumerate(V):
            c, block = compile_clf_equilibrium(
                sys, setup.P, x_k, covs[k], prm.t, prm.eta_v, beta, ("clf", -1, k),
                literal=prm.literal_cclf, eps=prm.psd_epsilon,
            )
            constraints.append(c)
        blocks.append(block)
    else:
        exit = ExitFace.from_polytope(poly, exit_row, prm.beta_V)
        coeffs = clf_path_coefficients(sys, exit, r)
        for k, x_k in enumerate(V):
            constraints.append(
                compile_clf_path(exit, x_k, coeffs, covs[k], prm.t, prm.eta_v, ("clf", setup.exit_face, k))
            )

    if setup.actuator is not None:
        A_u, b_u = (np.atleast_2d(np.asarray(setup.actuator[0], dtype=float)), np.asarray(setup.actuator[1], dtype=float))
        for j in range(A_u.shape[0]):
            for k, x_k in enumerate(V):
                constraints.append(
                    compile_actuator(A_u[j], float(b_u[j]), x_k, covs[k], prm.t, prm.eta_u, ("act", j, k))
                )

    n_k = sys.n_u * sys.n_x
    n_slack = len(constraints) if prm.slack else 0
    n = n_k + n_slack
    if prm.slack:
        constraints = [c.padded(n).with_slack(n_k + idx) for idx, c in enumerate(constraints)]
    else:
        constraints = [c.padded(n) for c in constraints]
    blocks = [b.padded(n) for b in blocks]
    return QcqpProblem(constraints, blocks, (sys.n_u, sys.n_x), n_slack, prm.rho)
