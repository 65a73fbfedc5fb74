"""Least-squares conditional expectations and the backward trapezoid scheme.

Conditional expectations given F_{t_k} are projections onto polynomials of
degree <= 2 in the current state and the path statistics declared by the
problem's functionals.  Each step's projector is factored once (thin SVD of
the standardised design) and reused by every Picard pass and every linear
variation equation solved on the same ensemble.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..funcalc.dsl import Functional

log = logging.getLogger(__name__)

RIDGE = 1e-8
RANK_TOL = 1e-10


class FeatureMap:
    """Polynomial features in (omega(t_k), statistics of `specs` at t_k)."""

    def __init__(self, grid, paths, specs: Sequence[Functional] = (), degree: int = 2, extra=None):
        self.grid = grid
        self.paths = paths
        self.specs = [s for s in specs if s is not None]
        self.degree = int(degree)
        self.extra = extra                 # optional (B, M+1, q) carrier values

    def base(self, k: int) -> np.ndarray:
        t = self.grid.time(k)
        cols = list(np.asarray(self.paths)[:, k, :].T)
        for s in self.specs:
            cols.extend(np.broadcast_to(np.asarray(c, dtype=float), (self.paths.shape[0],))
                        for c in s.statistics(self.grid, t, self.paths))
        if self.extra is not None:
            cols.extend(np.asarray(self.extra)[:, k, :].T)
        keep = []
        for c in cols:
            c = np.asarray(c, dtype=float)
            scale = 1.0 + float(np.max(np.abs(c)))
            if np.ptp(c) <= 1e-12 * scale:
                continue                                   # constant: covered by the intercept
            if any(np.max(np.abs(c - q)) <= 1e-12 * scale for q in keep):
                continue                                   # duplicate statistic
            keep.append(c)
        return np.stack(keep, axis=1) if keep else np.zeros((self.paths.shape[0], 0))

    def design(self, k: int) -> np.ndarray:
        X = self.base(k)
        B, m = X.shape
        if m:
            X = (X - X.mean(axis=0)) / X.std(axis=0)
        cols = [np.ones(B)]
        for deg in range(1, self.degree + 1):
            for idx in itertools.combinations_with_replacement(range(m), deg):
                cols.append(np.prod(X[:, idx], axis=1))
        return np.stack(cols, axis=1)


@dataclass
class Projector:
    """Orthogonal (or ridge) projection onto the span of one step's design."""
    U: np.ndarray
    shrink: Optional[np.ndarray] = None    # ridge factors s^2/(s^2+lambda) when rank deficient
    ridge: bool = False

    @classmethod
    def fit(cls, A: np.ndarray, k: int = -1) -> "Projector":
        U, s, _ = np.linalg.svd(A, full_matrices=False)
        if s.size and s[-1] > RANK_TOL * s[0]:
            return cls(U)
        lam = RIDGE * float(np.sum(s ** 2)) / max(A.shape[1], 1)
        log.warning("rank-deficient regression at step %d (%d columns, rank %d); ridge lambda=%.3g",
                    k, A.shape[1], int(np.sum(s > RANK_TOL * s[0])) if s.size else 0, lam)
        return cls(U, s ** 2 / (s ** 2 + lam), True)

    def __call__(self, target: np.ndarray) -> np.ndarray:
        c = self.U.T @ target
        if self.shrink is not None:
            c = c * self.shrink.reshape((-1,) + (1,) * (c.ndim - 1))
        return self.U @ c

    def leverage(self) -> np.ndarray:
        w = 1.0 if self.shrink is None else self.shrink
        return np.sum(self.U ** 2 * w, axis=1)

    def loo(self, target: np.ndarray, fitted: Optional[np.ndarray] = None) -> np.ndarray:
        """Leave-one-out fitted values: sample i's fit uses the other samples only."""
        fitted = self(target) if fitted is None else fitted
        h = self.leverage().reshape((-1,) + (1,) * (np.ndim(target) - 1))
        return (fitted - h * target) / (1.0 - h)


class JointFit:
    """Joint least squares y ~ a(x) + Z(x).dB_k with a, Z in the step basis.

    a estimates E_k[y] and Z the martingale coefficient.  Fitting both at
    once keeps the sample mean of dB_k out of the intercept and the
    (dB^2 - dt) noise out of Z; leave-one-out Z values are rank-one
    downdates of the same factorisation.
    """

    def __init__(self, D: np.ndarray, dB: np.ndarray, k: int = -1):
        N, p = D.shape
        self.D = D
        self.p, self.d = p, dB.shape[1]
        A = np.concatenate([D, (D[:, :, None] * dB[:, None, :]).reshape(N, p * self.d)], axis=1)
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        self.ridge = not (s.size and s[-1] > RANK_TOL * s[0])
        if self.ridge:
            lam = RIDGE * float(np.sum(s ** 2)) / max(A.shape[1], 1)
            log.warning("rank-deficient joint regression at step %d; ridge lambda=%.3g", k, lam)
            shrink = s ** 2 / (s ** 2 + lam)
            inv = s / (s ** 2 + lam)
        else:
            shrink = np.ones_like(s)
            inv = 1.0 / s
        self.U, self.W = U, Vt.T * inv
        self.h = np.sum(U ** 2 * shrink, axis=1)
        self._shrink = shrink

    def _split(self, coef):
        """coef (p(1+d), ...) -> (a (N, ...), Z (N, d, ...))."""
        p, d = self.p, self.d
        a = np.tensordot(self.D, coef[:p], axes=(1, 0))
        cz = coef[p:].reshape((p, d) + coef.shape[1:])
        return a, np.tensordot(self.D, cz, axes=(1, 0))

    def __call__(self, y: np.ndarray):
        """E_k[y] for y (N,) or (N, m), by the a-part of the joint fit."""
        return self._split(self.W @ (self.U.T @ y))[0]

    def with_z(self, y: np.ndarray):
        """(a, Z, Z_loo) for a single target y (N,)."""
        N = y.shape[0]
        c = self.W @ (self.U.T @ y)
        a, Z = self._split(c)
        fitted = self.U @ (self._shrink * (self.U.T @ y))
        r = (y - fitted) / (1.0 - self.h)
        # row i of U W^T is (A^T A)^{-1} A_i^T in coefficient space
        G = (self.U @ self.W.T)[:, self.p:].reshape(N, self.p, self.d)
        Z_loo = Z - np.einsum("np,npd->nd", self.D, G) * r[:, None]
        return a, Z, Z_loo


class ProjectorSet:
    """Lazily factored projectors for steps k0..M-1 of one ensemble."""

    def __init__(self, features: FeatureMap):
        self.features = features
        self._cache = {}
        self._jcache = {}
        self.ridge_steps = []

    def __getitem__(self, k: int) -> Projector:
        p = self._cache.get(k)
        if p is None:
            p = Projector.fit(self.features.design(k), k)
            if p.ridge:
                self.ridge_steps.append(k)
            self._cache[k] = p
        return p

    def joint(self, k: int, dB_k: np.ndarray) -> JointFit:
        """Joint fit for step k; dB_k must be the ensemble's own increments."""
        z = self._jcache.get(k)
        if z is None:
            z = self._jcache[k] = JointFit(self.features.design(k), dB_k, k)
            if z.ridge:
                self.ridge_steps.append(k)
        return z


@dataclass
class SweepResult:
    Y: np.ndarray                 # (B, M+1); nan before k0
    Z: np.ndarray                 # (B, M+1, d)
    F: np.ndarray                 # generator values (B, M+1)
    zeta: np.ndarray              # pathwise Phi + trapezoid of f
    zeta_cv: np.ndarray           # zeta minus the martingale sum of leave-one-out Z dB
    mart_mean: np.ndarray         # per-step mean of the martingale increment
    mart_stderr: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def theta_sweep(grid, k0: int, terminal: np.ndarray, dB: np.ndarray, proj: ProjectorSet,
                gen: Callable) -> SweepResult:
    """Backward explicit trapezoid (Heun) scheme

        (a, Z_k) = argmin E|Y_{k+1} - a - Z dB_k|^2   over a, Z in the basis
        Y*_k = a + E_k[dt f_{k+1}]                       (predictor)
        Y_k  = a + E_k[dt/2 f_{k+1}] + dt/2 f(t_k, Y*_k, Z_k)

    with E_k the a-part of the same joint fit.  gen(k, y, z) evaluates the
    generator at node k; the stored f_k is the one used in the corrector.
    Z_M is copied from Z_{M-1}.

    zeta_cv = zeta - C with C = sum_k Z~_k dB_k, Z~ the leave-one-out Z fit
    (independent of dB_k given F_{t_k}, so C has mean zero).
    """
    B, M = terminal.shape[0], grid.M
    d = dB.shape[2]
    dt = grid.dt
    Y = np.full((B, M + 1), np.nan)
    Z = np.zeros((B, M + 1, d))
    F = np.zeros((B, M + 1))
    Y[:, M] = terminal
    mart_mean = np.zeros(M)
    mart_se = np.zeros(M)
    cv = np.zeros(B)
    for k in range(M - 1, k0 - 1, -1):
        J = proj.joint(k, dB[:, k])
        PY, Z[:, k], Z_loo = J.with_z(Y[:, k + 1])
        cv += np.einsum("bd,bd->b", Z_loo, dB[:, k])
        if k == M - 1:
            Z[:, M] = Z[:, k]
            F[:, M] = gen(M, Y[:, M], Z[:, M])
        half = J(0.5 * dt * F[:, k + 1])
        A = PY + half
        F[:, k] = gen(k, A + half, Z[:, k])
        Y[:, k] = A + 0.5 * dt * F[:, k]
        inc = Y[:, k + 1] + 0.5 * dt * (F[:, k] + F[:, k + 1]) - Y[:, k]
        mart_mean[k] = inc.mean()
        mart_se[k] = inc.std(ddof=1) / np.sqrt(B) if B > 1 else 0.0
    zeta = Y[:, M] + 0.5 * dt * np.sum(F[:, k0:M] + F[:, k0 + 1:M + 1], axis=1)
    return SweepResult(Y, Z, F, zeta, zeta - cv, mart_mean, mart_se)


def linear_sweep(grid, k0, terminal, dB, proj: ProjectorSet, alpha, beta, source,
                 mf: Optional[Callable] = None):
    """theta_sweep for f = alpha Y + beta.Z + source + mf(k) with per-node
    arrays alpha (B, M+1), beta (B, M+1, d), source (B, M+1); mf(k) is the
    frozen mean-field term of a Picard pass."""
    def gen(k, y, z):
        out = alpha[:, k] * y + np.einsum("bd,bd->b", beta[:, k], z) + source[:, k]
        if mf is not None:
            out = out + mf(k)
        return out
    return theta_sweep(grid, k0, terminal, dB, proj, gen)
