"""Log-barrier interior-point solver for the compiled QCQP, and the LMI search for P.

The solver handles problems of the form

    min  0.5 k'Hk + c'k
    s.t. ||S_c k + s_c||^2 + l_c'k + l0_c <= 0      (convex quadratic rows)
         F0_j + sum_p k_p F_jp  >  0                (linear matrix inequalities)

by following the central path of ``f0(k) + mu * phi(k)`` with damped Newton
steps, where ``phi`` is ``-sum log(-g_c) - sum log det F_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .compiler import PsdBlock, QcqpProblem, SquaredAffineConstraint
from .errors import Infeasible, NumericalFailure
from .systems import LinearSystem

log = logging.getLogger(__name__)

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
MAX_ITERS = "MaxIters"

PHASE1_MARGIN = 1e-8


@dataclass
class SolverConfig:
    barrier_mu0: float = 1.0
    barrier_factor: float = 10.0
    max_newton_iters: int = 200
    tol_kkt: float = 1e-7
    psd_epsilon: float = 1e-6
    max_outer_iters: int = 60

    def __post_init__(self):
        if self.barrier_factor <= 1:
            raise ValueError("barrier_factor must exceed 1")
        for name in ("barrier_mu0", "max_newton_iters", "tol_kkt", "psd_epsilon", "max_outer_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SynthesisResult:
    K: np.ndarray
    slacks: np.ndarray
    objective_value: float
    residuals: np.ndarray
    status: str
    P: Optional[np.ndarray] = None
    kkt_residual: float = float("nan")
    kkt_relative: float = float("nan")
    complementarity: float = float("nan")
    iterations: int = 0
    kappa: Optional[np.ndarray] = field(default=None, repr=False)
    multipliers: Optional[np.ndarray] = field(default=None, repr=False)
    lmi_duals: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = {
            "K": self.K.tolist(),
            "slacks": self.slacks.tolist(),
            "status": self.status,
            "objective": self.objective_value,
        }
        if self.P is not None:
            out["P"] = self.P.tolist()
        return out


class _Rows:
    """Stacked quadratic rows ``h_c(k) = ||S_c k + s0_c||^2 + l_c'k + l0_c``."""

    def __init__(self, n, rows):
        self.m = len(rows)
        sq = [q[0] for q in rows if q[0].shape[0]]
        self.S = np.vstack(sq) if sq else np.zeros((0, n))
        self.s0 = np.concatenate([q[1] for q in rows]) if rows else np.zeros(0)
        self.owner = (np.concatenate([np.full(q[0].shape[0], i) for i, q in enumerate(rows)]).astype(int)
                      if rows else np.zeros(0, int))
        self.L = np.array([q[2] for q in rows]).reshape(self.m, n)
        self.l0 = np.array([q[3] for q in rows], dtype=float)

    def value(self, k):
        r = self.S @ k + self.s0
        return np.bincount(self.owner, weights=r * r, minlength=self.m) + self.L @ k + self.l0, r

    def jacobian(self, r) -> np.ndarray:
        G = self.L.copy()
        if self.S.shape[0]:
            np.add.at(G, self.owner, 2.0 * r[:, None] * self.S)
        return G

    def curvature(self, weights) -> np.ndarray:
        """``sum_c weights_c * Hessian(h_c)``."""
        if not self.S.shape[0]:
            return 0.0
        return 2.0 * (self.S.T * weights[self.owner]) @ self.S


def _relaxed_terms(h, w, mu):
    """Barrier of ``h - s <= 0, s >= 0`` with cost ``w s``, minimised over ``s``.

    The minimiser solves ``w = mu/(s - h) + mu/s``; both ``s`` and the gap
    ``s - h`` are formed without cancellation.  Returns ``(psi, lam, dlam,
    s, gap)`` with ``lam = dpsi/dh = mu/gap`` and ``dlam = mu/(s^2+gap^2)``.
    """
    wh = w * h
    D = np.sqrt(wh * wh + 4.0 * mu * mu)
    pos = wh >= 0
    s = np.empty_like(h)
    gap = np.empty_like(h)
    hp = np.where(pos, wh, 0.0)
    hn = np.where(pos, 0.0, wh)
    s_pos = (hp + 2.0 * mu + D) / (2.0 * w)
    gap_pos = (2.0 * mu + 4.0 * mu * mu / (D + hp)) / (2.0 * w)
    s_neg = (2.0 * mu + 4.0 * mu * mu / (D - hn)) / (2.0 * w)
    s[pos], gap[pos] = s_pos[pos], gap_pos[pos]
    s[~pos] = s_neg[~pos]
    gap[~pos] = s[~pos] - h[~pos]
    psi = w * s - mu * np.log(gap) - mu * np.log(s)
    return psi, mu / gap, mu / (s * s + gap * gap), s, gap


class _Barrier:
    """Dense barrier over quadratic rows (hard or relaxed) and LMI blocks.

    Hard rows must stay strictly negative.  Each relaxed row ``h_c`` carries
    a nonnegative slack ``s_c`` priced at ``w_c`` per unit; the slack is
    minimised out in closed form so it never enters the Newton system.
    """

    def __init__(self, n, H, c, quad, blocks, relaxed=(), weights=()):
        self.n = n
        self.H = H
        self.c = c
        self.hard = _Rows(n, list(quad))
        self.soft = _Rows(n, list(relaxed))
        self.w = np.asarray(weights, dtype=float).reshape(self.soft.m)
        self.blocks = blocks  # list of (F0, F) with F shape (n, d, d)
        self.last_scale = np.zeros(n)

    @property
    def m(self) -> int:
        return self.hard.m

    @property
    def n_terms(self) -> int:
        """Number of scalar barrier terms (LMIs count their dimension)."""
        return self.hard.m + 2 * self.soft.m + sum(F0.shape[0] for F0, _ in self.blocks)

    def g(self, k):
        return self.hard.value(k)

    def lmi(self, k):
        return [F0 + np.tensordot(k, F, axes=1) for F0, F in self.blocks]

    def feasible(self, k) -> bool:
        if not np.all(np.isfinite(k)):
            return False
        g, _ = self.g(k)
        if np.any(g >= 0):
            return False
        for M in self.lmi(k):
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                return False
        return True

    def value(self, k, mu) -> float:
        g, _ = self.g(k)
        val = 0.5 * k @ self.H @ k + self.c @ k - mu * np.log(-g).sum()
        if self.soft.m:
            h, _ = self.soft.value(k)
            val += _relaxed_terms(h, self.w, mu)[0].sum()
        for M in self.lmi(k):
            L = np.linalg.cholesky(M)
            val -= mu * 2.0 * np.log(np.diag(L)).sum()
        return float(val)

    def derivatives(self, k, mu):
        g, r = self.g(k)
        inv = 1.0 / (-g)
        G = self.hard.jacobian(r)
        grad = self.H @ k + self.c + mu * (G.T @ inv)
        # magnitude of the terms that cancel in grad, for relative tests
        scale = np.abs(self.H @ k) + np.abs(self.c) + mu * (np.abs(G).T @ inv)
        hess = self.H + mu * (G.T * inv ** 2) @ G + self.hard.curvature(mu * inv)
        if self.soft.m:
            h, rs = self.soft.value(k)
            _, lam, dlam, _, _ = _relaxed_terms(h, self.w, mu)
            Gs = self.soft.jacobian(rs)
            grad = grad + Gs.T @ lam
            scale = scale + np.abs(Gs).T @ lam
            hess = hess + (Gs.T * dlam) @ Gs + self.soft.curvature(lam)
        for (F0, F), M in zip(self.blocks, self.lmi(k)):
            Minv = np.linalg.inv(M)
            X = np.einsum("ij,pjk->pik", Minv, F)
            tr = mu * np.einsum("pii->p", X)
            grad -= tr
            scale += np.abs(tr)
            hess += mu * np.einsum("pij,qji->pq", X, X)
        self.last_scale = scale
        return grad, hess, g

    def multipliers(self, k, mu):
        """Central-path multipliers: hard rows, relaxed rows, slack bounds, LMIs."""
        g, _ = self.g(k)
        lam = mu / (-g)
        if self.soft.m:
            h, _ = self.soft.value(k)
            _, lam_s, _, s, gap = _relaxed_terms(h, self.w, mu)
        else:
            lam_s = s = gap = np.zeros(0)
        Z = [mu * np.linalg.inv(M) for M in self.lmi(k)]
        return {"hard": lam, "relaxed": lam_s, "bound": mu / s if s.size else s,
                "g": g, "slack": s, "gap": gap, "lmi": Z}

    def certificate(self, k, mult) -> tuple[float, float]:
        """KKT stationarity norm over ``(k, slacks)`` and worst complementarity."""
        _, r = self.g(k)
        res = self.H @ k + self.c + self.hard.jacobian(r).T @ mult["hard"]
        if self.soft.m:
            _, rs = self.soft.value(k)
            res = res + self.soft.jacobian(rs).T @ mult["relaxed"]
        for (F0, F), Zj in zip(self.blocks, mult["lmi"]):
            res = res - np.einsum("ij,pji->p", Zj, F)
        slack_res = self.w - mult["relaxed"] - mult["bound"]
        stat = float(np.sqrt(res @ res + slack_res @ slack_res))
        comp = [np.abs(mult["hard"] * mult["g"]), mult["relaxed"] * mult["gap"], mult["bound"] * mult["slack"]]
        comp = [float(c.max()) for c in comp if c.size]
        # spectral complementarity ||Z M||, equal to mu on the central path
        comp += [float(np.linalg.norm(Zj @ M, 2)) for Zj, M in zip(mult["lmi"], self.lmi(k))]
        return stat, max(comp, default=0.0)


def _polish(bar: _Barrier, k, mult):
    """Minimum-norm multiplier correction that zeroes gain-space stationarity.

    Central-path estimates ``mu/gap`` and ``mu M^-1`` inherit the rounding
    error of nearly active constraints magnified by ``1/mu``.  Scalar
    multipliers strictly inside their range are moved by at most half their
    distance to the nearest bound (``0`` or the slack price); LMI duals are
    corrected as ``R (I + Y) R`` with ``R = Z^(1/2)`` and ``||Y|| <= 1/2``,
    which keeps them positive semidefinite.  Slack-bound multipliers are
    reset afterwards so the slack equations stay exact.
    """
    _, r = bar.g(k)
    cols, room = [bar.hard.jacobian(r)], [mult["hard"]]
    if bar.soft.m:
        _, rs = bar.soft.value(k)
        cols.append(bar.soft.jacobian(rs))
        room.append(np.minimum(mult["relaxed"], bar.w - mult["relaxed"]))
    omega = np.clip(np.concatenate(room), 0.0, None)
    J = [np.vstack(cols).T * omega[None, :]]
    res = bar.H @ k + bar.c + np.vstack(cols).T @ np.concatenate([mult["hard"], mult["relaxed"]])
    roots, bases = [], []
    for (F0, F), Zj in zip(bar.blocks, mult["lmi"]):
        res = res - np.einsum("ij,pji->p", Zj, F)
        R = _psd_root(Zj)
        basis = _sym_basis(F0.shape[0])
        J.append(np.stack([-np.einsum("ij,pji->p", R @ E @ R, F) for E in basis], axis=1))
        roots.append(R)
        bases.append(basis)
    J = np.hstack(J)
    if not J.size:
        return mult
    y, *_ = np.linalg.lstsq(J, -res, rcond=None)
    m = omega.size
    if m and np.abs(y[:m]).max() > 0.5:
        return mult
    out = dict(mult)
    pos = m
    Z_new = []
    for R, basis in zip(roots, bases):
        Y = sum(v * E for v, E in zip(y[pos:pos + len(basis)], basis))
        pos += len(basis)
        if np.abs(np.linalg.eigvalsh(Y)).max() > 0.5:
            return mult
        Z_new.append(R @ (np.eye(R.shape[0]) + Y) @ R)
    delta = omega * y[:m]
    out["hard"] = mult["hard"] + delta[: bar.hard.m]
    if bar.soft.m:
        out["relaxed"] = mult["relaxed"] + delta[bar.hard.m:]
        out["bound"] = bar.w - out["relaxed"]
    out["lmi"] = Z_new
    return out


def _psd_root(Z):
    w, U = np.linalg.eigh((Z + Z.T) / 2)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def _solve_newton(hess, grad):
    """Newton step with symmetric Jacobi scaling and escalating regularisation."""
    d = np.sqrt(np.maximum(np.abs(np.diag(hess)), 1e-300))
    Hs = hess / d[:, None] / d[None, :]
    gs = grad / d
    eye = np.eye(hess.shape[0])
    reg = 0.0
    for attempt in range(6):
        try:
            L = np.linalg.cholesky(Hs + reg * eye)
            y = np.linalg.solve(L, -gs)
            return np.linalg.solve(L.T, y) / d
        except np.linalg.LinAlgError:
            reg = 1e-10 if reg == 0.0 else reg * 10.0
    raise NumericalFailure("Newton system not positive definite after regularisation")


def _stationary(bar: _Barrier, grad, tol: float, stalled: bool) -> bool:
    """Absolute gradient test, relaxed to a relative one once Newton stalls.

    Near the end of the path the gradient is a sum of terms of size
    ``lam_c * |grad g_c|`` that cancel; when the line search can no longer
    make progress the achievable residual is set by rounding in ``g_c``, so
    it is judged against the size of those terms instead.
    """
    gn = float(np.linalg.norm(grad))
    if gn <= tol:
        return True
    return stalled and gn <= tol * max(1.0, float(np.linalg.norm(bar.last_scale)))


def _center(bar: _Barrier, k, mu, cfg: SolverConfig, tol: float, stop=None):
    """Damped Newton on ``f0 + mu*phi`` from a strictly feasible ``k``."""
    val = bar.value(k, mu)
    for it in range(cfg.max_newton_iters):
        grad, hess, _ = bar.derivatives(k, mu)
        if _stationary(bar, grad, tol, False):
            return k, it, True
        step = _solve_newton(hess, grad)
        dec = -grad @ step
        if dec <= 0.0:
            return k, it, _stationary(bar, grad, tol, True)
        if dec <= 1e-12 * (1.0 + abs(val)):
            # merit value is flat to roundoff: take the full step if it is
            # feasible and shrinks the gradient, otherwise stop here
            cand = k + step
            if bar.feasible(cand):
                g_new, _, _ = bar.derivatives(cand, mu)
                if np.linalg.norm(g_new) < np.linalg.norm(grad):
                    k, val = cand, bar.value(cand, mu)
                    continue
            bar.derivatives(k, mu)
            return k, it, _stationary(bar, grad, tol, True)
        s = 1.0
        while True:
            cand = k + s * step
            if bar.feasible(cand):
                new_val = bar.value(cand, mu)
                if new_val <= val - 0.25 * s * dec:
                    break
            s *= 0.5
            if s < 1e-14:
                return k, it, _stationary(bar, grad, tol, True)
        k, val = cand, new_val
        if stop is not None and stop(k):
            return k, it, True
    return k, cfg.max_newton_iters, False


def _barrier_solve(bar: _Barrier, k0, cfg: SolverConfig, stop=None):
    """Follow the central path; returns ``(k, mu, iterations, converged)``.

    Complementarity equals ``mu`` per barrier term on the central path, so
    the last centering uses ``mu = tol_kkt / (2 * terms)``, which bounds both
    the per-term complementarity and the total duality gap by ``tol_kkt / 2``.
    """
    k, mu = k0.copy(), cfg.barrier_mu0
    mu_final = 0.5 * cfg.tol_kkt / max(1, bar.n_terms)
    total = 0
    for outer in range(cfg.max_outer_iters):
        final = mu <= mu_final
        tol = mu_final if final else max(1e-6, mu * 1e-2)
        k, its, ok = _center(bar, k, mu, cfg, tol, stop)
        total += its
        if stop is not None and stop(k):
            return k, mu, total, True
        if final:
            return k, mu, total, ok
        mu = max(mu / cfg.barrier_factor, mu_final)
    return k, mu, total, False


def _quad_rows(constraints, n):
    """``(S, s0, l, l0)`` per constraint, without any slack column."""
    out = []
    for c in constraints:
        S = np.array([a.coeffs for a in c.squares]).reshape(len(c.squares), -1)[:, :n]
        s0 = np.array([a.offset for a in c.squares])
        out.append((S, s0, c.linear.coeffs[:n].copy(), c.linear.offset))
    return out


def barrier_minimize(H, c, quad, blocks, cfg: SolverConfig, k0=None, relaxed=(), weights=()):
    """Phase I then phase II.

    ``quad`` rows ``(S, s0, l, l0)`` are hard constraints, ``blocks`` are
    LMIs ``(F0, F)``, and ``relaxed`` rows get a slack priced by ``weights``.
    Returns ``(k, status, info)``; raises :class:`Infeasible` if the hard
    part has no strictly feasible point.
    """
    n = H.shape[0]
    k0 = np.zeros(n) if k0 is None else np.asarray(k0, dtype=float)
    bar = _Barrier(n, H, c, quad, blocks, relaxed, weights)
    if not bar.feasible(k0):
        k0 = _phase_one(bar, k0, cfg)
    # rescale so the objective gradient (penalties included) is of order one
    # at the start point; otherwise large multipliers push active LMIs to
    # eigenvalues near rounding level before complementarity is reached
    factor = _gradient_scale(bar, k0)
    if factor > 1.0:
        bar = _Barrier(n, H / factor, c / factor, quad, blocks, relaxed, bar.w / factor)
    k, mu, its, ok = _barrier_solve(bar, k0, cfg)
    mult = _polish(bar, k, bar.multipliers(k, mu))
    kkt, comp = bar.certificate(k, mult)
    grad, _, _ = bar.derivatives(k, mu)
    info = {
        "mu": mu,
        "iterations": its,
        "kkt": kkt,
        "kkt_relative": float(np.linalg.norm(grad)) / max(1.0, float(np.linalg.norm(bar.last_scale))),
        "complementarity": comp,
        "centered": ok,
        "multipliers": mult,
        "objective_scale": factor,
    }
    # the certificate, not the inner-loop flag, decides optimality
    certified = kkt <= cfg.tol_kkt and comp <= cfg.tol_kkt
    return k, (OPTIMAL if certified else MAX_ITERS), info


def _gradient_scale(bar: _Barrier, k) -> float:
    """Norm of the objective gradient at ``k``, treating every relaxed row as active."""
    grad = bar.H @ k + bar.c
    if bar.soft.m:
        _, rs = bar.soft.value(k)
        grad = grad + bar.soft.jacobian(rs).T @ bar.w
    return max(1.0, float(np.linalg.norm(grad)))


def _phase_one(bar: _Barrier, k0, cfg: SolverConfig):
    """Minimise ``s`` s.t. ``g_c(k) <= s``, ``F_j(k) + s I > 0``, ``s >= -1`` over hard parts."""
    n = bar.n
    hard = bar.hard
    g0, _ = bar.g(k0)
    worst = [g0.max()] if g0.size else []
    for M in bar.lmi(k0):
        worst.append(-np.linalg.eigvalsh(M).min())
    s0 = max(max(worst, default=0.0), 0.0) + 1.0
    quad = []
    for i in range(hard.m):
        rows = hard.owner == i
        l = np.append(hard.L[i], -1.0)
        quad.append((np.hstack([hard.S[rows], np.zeros((rows.sum(), 1))]), hard.s0[rows], l, hard.l0[i]))
    lower = np.zeros(n + 1)
    lower[-1] = -1.0
    quad.append((np.zeros((0, n + 1)), np.zeros(0), lower, -1.0))
    blocks = []
    for F0, F in bar.blocks:
        d = F0.shape[0]
        blocks.append((F0, np.concatenate([F, np.eye(d)[None]], axis=0)))
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = 1e-6 * np.eye(n)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    aux = _Barrier(n + 1, H, c, quad, blocks)
    z0 = np.append(k0, s0)
    cfg1 = SolverConfig(cfg.barrier_mu0, cfg.barrier_factor, cfg.max_newton_iters, 1e-9, cfg.psd_epsilon, cfg.max_outer_iters)
    z, _, _, _ = _barrier_solve(aux, z0, cfg1, stop=None)
    if z[-1] >= -PHASE1_MARGIN:
        raise Infeasible(f"no strictly feasible point (phase-I optimum {z[-1]:.3g})")
    log.debug("phase I found s = %.3g", z[-1])
    return z[:n]


def solve_qcqp(problem: QcqpProblem, cfg: Optional[SolverConfig] = None, K0=None) -> SynthesisResult:
    """Solve a compiled synthesis problem; infeasibility is reported in ``status``.

    Slack columns are not handed to Newton: for a fixed gain the optimal
    slack of each relaxed row has a closed form, so the barrier is
    minimised over the gain only and the slacks are read off at the end.
    The objective is divided by its largest coefficient (an equivalent
    problem, keeping multipliers of order one); ``kkt_residual`` and
    ``complementarity`` are reported for this normalised problem.
    """
    cfg = cfg or SolverConfig()
    n_k = problem.n_k
    H, c = problem.objective_terms()
    scale = max(1.0, float(np.abs(H).max(initial=0.0)), float(np.abs(c).max(initial=0.0)))
    H, c = H / scale, c / scale
    rows = _quad_rows(problem.constraints, n_k)
    if problem.n_slack:
        owner = [cc.slack_index for cc in problem.constraints]
        if any(j is None for j in owner) or sorted(owner) != list(range(n_k, problem.n_decision)):
            raise ValueError("every constraint needs its own slack column")
        weights = c[owner]
        quad, relaxed = [], rows
    else:
        weights, quad, relaxed = (), rows, ()
    blocks = [(b.F0 - b.eps * np.eye(b.F0.shape[0]), b.F[:n_k]) for b in problem.psd_blocks]
    k0 = None if K0 is None else np.asarray(K0, dtype=float).ravel()
    try:
        k, status, info = barrier_minimize(H[:n_k, :n_k], c[:n_k], quad, blocks, cfg, k0, relaxed, weights)
    except Infeasible:
        K = np.full(problem.K_shape, np.nan)
        return SynthesisResult(K, np.full(problem.n_slack, np.nan), float("nan"),
                               np.full(len(problem.constraints), np.nan), INFEASIBLE)
    mult = info["multipliers"]
    scale *= info["objective_scale"]
    kappa = np.concatenate([k, mult["slack"]]) if problem.n_slack else k
    K, s = problem.unpack(kappa)
    lam = mult["relaxed"] if problem.n_slack else mult["hard"]
    return SynthesisResult(
        K=K,
        slacks=s,
        objective_value=problem.objective(kappa),
        residuals=problem.residuals(kappa),
        status=status,
        kkt_residual=info["kkt"],
        kkt_relative=info["kkt_relative"],
        complementarity=info["complementarity"],
        iterations=info["iterations"],
        kappa=kappa,
        multipliers=np.concatenate([lam, mult["bound"]]) * scale,
        lmi_duals=[Z * scale for Z in mult["lmi"]],
    )


def kkt_residual(problem: QcqpProblem, kappa, multipliers, lmi_duals=()) -> float:
    """``||grad f0 + sum lam_c grad g_c - sum <Z_j, dF_j>||`` over gain and slacks.

    ``multipliers`` lists one value per constraint followed by one per slack
    bound ``-s_j <= 0``; the result is in the units of ``problem``.
    """
    n = problem.n_decision
    H, c = problem.objective_terms()
    grad = H @ kappa + c
    for cc, lam in zip(problem.constraints, multipliers[: len(problem.constraints)]):
        r = np.array([a(kappa) for a in cc.squares])
        g = sum(2.0 * ri * a.coeffs for ri, a in zip(r, cc.squares)) + cc.linear.coeffs
        g = np.asarray(g, dtype=float).copy()
        if cc.slack_index is not None:
            g[cc.slack_index] -= 1.0
        grad += lam * g
    for j, lam in zip(range(problem.n_k, n), multipliers[len(problem.constraints):]):
        grad[j] -= lam
    for b, Z in zip(problem.psd_blocks, lmi_duals):
        grad -= np.einsum("ij,pji->p", Z, b.F)
    return float(np.linalg.norm(grad))


# -- Lyapunov matrix search ---------------------------------------------------

def _sym_basis(n: int) -> list[np.ndarray]:
    basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            basis.append(E)
    return basis


def find_P(sys: LinearSystem, beta_V: float, cfg: Optional[SolverConfig] = None, weights=None,
           with_gain: bool = False, reg: float = 1.0, margin: float = 0.1):
    """Lyapunov matrix for some stabilising gain at decay rate ``beta_V``.

    Works in the substituted variables ``Q = P^-1`` and ``Y = K Q``:

        min  -weights' Lam + reg * (||Y||_F^2 + ||Q||_F^2)
        s.t. Q A' + A Q + beta Q + Y'B' + B Y + diag(Lam) < 0,
             Q >= I,  Lam >= margin.

    The homogeneous inequality has a free scale; ``Q >= I`` fixes it from
    below and the quadratic term keeps the margin ``Lam`` (and with it the
    implied gain) finite, so the optimum is unique.  The floor ``margin``
    keeps the certified gain strictly inside the Lyapunov cone, so the later
    synthesis step has room to satisfy its own ``eps`` margin.  Returns ``P = Q^-1``
    (and ``K = Y Q^-1`` when ``with_gain`` is set).
    """
    cfg = cfg or SolverConfig()
    A, B = sys.A, sys.B
    n, nu = sys.n_x, sys.n_u
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (n,) or np.any(weights < 0):
        raise ValueError("weights must be a nonnegative vector of length n_x")
    if reg <= 0 or margin < 0:
        raise ValueError("reg must be positive and margin nonnegative")
    basis = _sym_basis(n)
    nq, ny = len(basis), nu * n
    N = nq + ny + n
    eps = cfg.psd_epsilon

    # block 1: -(QA' + AQ + beta Q + Y'B' + BY + diag Lam) - eps I > 0
    F1 = np.zeros((N, n, n))
    for p, E in enumerate(basis):
        F1[p] = -(E @ A.T + A @ E + beta_V * E)
    for m in range(nu):
        for l in range(n):
            Ey = np.zeros((nu, n))
            Ey[m, l] = 1.0
            BY = B @ Ey
            F1[nq + m * n + l] = -(BY + BY.T)
    for i in range(n):
        F1[nq + ny + i, i, i] = -1.0
    F2 = np.zeros((N, n, n))
    F2[:nq] = basis
    blocks = [(-eps * np.eye(n), F1), (-np.eye(n), F2)]
    quad = []
    for i in range(n):
        lo = np.zeros(N)
        lo[nq + ny + i] = -1.0
        quad.append((np.zeros((0, N)), np.zeros(0), lo, float(margin)))
    # ||Q||_F^2 counts off-diagonal basis entries twice
    qw = np.array([1.0 if i == j else 2.0 for i in range(n) for j in range(i, n)])
    H = np.zeros((N, N))
    H[:nq, :nq] = 2.0 * reg * np.diag(qw)
    H[nq:nq + ny, nq:nq + ny] = 2.0 * reg * np.eye(ny)
    c = np.zeros(N)
    c[nq + ny:] = -weights
    k0 = np.zeros(N)
    k0[:nq] = np.array([2.0 if i == j else 0.0 for i in range(n) for j in range(i, n)])
    try:
        k, status, _ = barrier_minimize(H, c, quad, blocks, cfg, k0)
    except Infeasible:
        raise Infeasible(f"no Lyapunov certificate at rate beta_V = {beta_V}") from None
    Q = sum(v * E for v, E in zip(k[:nq], basis))
    Y = k[nq:nq + ny].reshape(nu, n)
    P = np.linalg.inv(Q)
    P = (P + P.T) / 2
    if np.linalg.eigvalsh(P).min() <= 0:
        raise NumericalFailure("recovered P is not positive definite")
    if with_gain:
        return P, Y @ P
    return P


def verify_lyapunov(P, A, B, K, beta_V: float) -> float:
    """Largest eigenvalue of ``(A+BK)'P + P(A+BK) + beta P``; negative certifies decay."""
    P, A, B, K = (np.asarray(m, dtype=float) for m in (P, A, B, K))
    if B.ndim == 1:
        B = B[:, None]
    Acl = A + B @ K
    M = Acl.T @ P + P @ Acl + beta_V * P
    return float(np.linalg.eigvalsh((M + M.T) / 2).max())
