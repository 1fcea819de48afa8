"""Chebyshev relaxation of scalar chance constraints and a Monte Carlo check of it.

For a random scalar ``f`` with mean ``m`` and variance ``v`` the choice
``phi(u) = (u + 1)^2`` gives

    P(f >= 0) <= E[(f + t)^2] / t^2,

so ``m^2 + v + 2 t m + t^2 (1 - eta) <= 0`` certifies ``P(f >= 0) <= eta``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CholeskyFailure, NonPSDVariance

WILSON_Z = 1.959963984540054
PSD_CLIP = 1e-10


@dataclass(frozen=True)
class AffineRandomScalar:
    """``f = b @ (x + theta) + c``."""

    b: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        object.__setattr__(self, "c", float(self.c))

    def mean(self, x) -> float:
        return float(self.b @ np.asarray(x, dtype=float) + self.c)


@dataclass(frozen=True)
class NoiseModel:
    """Measurement-noise covariance ``Sigma(x) = base + sum_l x_l * linear[l]``."""

    base: np.ndarray
    linear: Optional[tuple] = field(default=None)

    def __post_init__(self):
        base = np.atleast_2d(np.asarray(self.base, dtype=float))
        if base.shape[0] != base.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(base, base.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "base", base)
        if self.linear is not None:
            terms = tuple(np.atleast_2d(np.asarray(S, dtype=float)) for S in self.linear)
            if len(terms) != base.shape[0] or any(S.shape != base.shape for S in terms):
                raise ValueError("need one covariance slope per state coordinate")
            object.__setattr__(self, "linear", terms)

    @classmethod
    def zero(cls, n: int) -> "NoiseModel":
        return cls(np.zeros((n, n)))

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    @property
    def is_constant(self) -> bool:
        return self.linear is None

    def covariance(self, x=None) -> np.ndarray:
        if self.linear is None or x is None:
            return self.base
        x = np.asarray(x, dtype=float)
        return self.base + sum(xl * S for xl, S in zip(x, self.linear))

    def scaled(self, sigma: float) -> "NoiseModel":
        s2 = float(sigma) ** 2
        lin = None if self.linear is None else tuple(s2 * S for S in self.linear)
        return NoiseModel(s2 * self.base, lin)

    def check_psd(self, points) -> None:
        for x in np.atleast_2d(points):
            if np.linalg.eigvalsh(self.covariance(x)).min() < -PSD_CLIP:
                raise CholeskyFailure(f"covariance not PSD at {np.round(x, 6).tolist()}")

    def to_json(self) -> dict:
        out = {"sigma0": self.base.tolist()}
        if self.linear is not None:
            out["linear"] = [S.tolist() for S in self.linear]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseModel":
        return cls(obj["sigma0"], obj.get("linear"))


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric square root, clipping eigenvalues in ``[-1e-10, 0)`` to zero."""
    S = np.asarray(S, dtype=float)
    w, U = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -PSD_CLIP * max(1.0, abs(w).max()):
        raise CholeskyFailure(f"matrix has eigenvalue {w.min():.3g}")
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def chebyshev_residual(mean_f: float, var_f: float, t: float, eta: float) -> float:
    if t <= 0:
        raise ValueError("t must be positive")
    return mean_f ** 2 + var_f + 2.0 * t * mean_f + t ** 2 * (1.0 - eta)


def relax_chance_ge(f: AffineRandomScalar, x, sigma: NoiseModel, t: float, eta: float) -> float:
    """Residual of the quadratic certificate for ``P(f >= 0) <= eta``; ``<= 0`` certifies."""
    var = float(f.b @ sigma.covariance(x) @ f.b)
    if var < -1e-12:
        raise NonPSDVariance(f"b' Sigma b = {var:.3g}")
    return chebyshev_residual(f.mean(x), max(var, 0.0), t, eta)


def wilson_halfwidth(hits: int, n: int, z: float = WILSON_Z) -> float:
    p = hits / n
    denom = 1.0 + z * z / n
    return z / denom * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))


def _count_hits(f: AffineRandomScalar, mean_point, root, n, seed_seq) -> int:
    rng = np.random.default_rng(seed_seq)
    theta = rng.standard_normal((n, root.shape[0])) @ root
    return int(np.count_nonzero((mean_point + theta) @ f.b + f.c >= 0.0))


def monte_carlo_probability(
    f: AffineRandomScalar,
    x,
    sigma: NoiseModel,
    samples: int = 100_000,
    seed: int = 0,
    workers: int = 1,
) -> tuple[float, float]:
    """Empirical ``P(f >= 0)`` under Gaussian ``theta ~ N(0, Sigma(x))``.

    The sample budget is split into ``workers`` chunks, each with its own child
    seed, and hit counts are summed; the result depends only on
    ``(seed, samples, workers)``.
    """
    x = np.asarray(x, dtype=float)
    root = psd_sqrt(sigma.covariance(x))
    chunks = np.full(workers, samples // workers)
    chunks[: samples % workers] += 1
    children = np.random.SeedSequence(seed).spawn(workers)
    if workers == 1:
        hits = _count_hits(f, x, root, samples, children[0])
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(lambda a: _count_hits(f, x, root, *a), zip(chunks, children)))
    return hits / samples, wilson_halfwidth(hits, samples)


def certified_mean_interval(var: float, t: float, eta: float) -> Optional[tuple[float, float]]:
    """Range of means for which the Chebyshev residual is nonpositive, if any."""
    disc = t * t * eta - var
    if disc < 0:
        return None
    r = math.sqrt(disc)
    return -t - r, -t + r

