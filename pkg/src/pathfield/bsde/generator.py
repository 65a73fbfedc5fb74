"""BSDE generators f(t, omega, y, z, mu, nu).

nu is a law on the reals carried as an empirical sample; mu is the frozen
path-measure flow (an array of particle paths, read at the running time).
Every generator exposes the partial derivatives the variation equations need.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..funcalc.dsl import Functional, FunctionalSpec
from ..funcalc.fd import FdConfig, fd_bundle
from ..funcalc.smooth import SmoothMap

log = logging.getLogger(__name__)


@dataclass
class Slot:
    """Frozen non-(y, z) arguments of the generator at node k."""
    grid: object
    k: int
    paths: np.ndarray                    # (B, M+1, d), read at nodes <= k
    measure: Optional[np.ndarray] = None  # (P, M+1, d)
    nu: Optional[np.ndarray] = None       # (N_nu,) sample of the law of Y at t_k

    @property
    def t(self):
        return self.grid.time(self.k)


NU_STATS = {
    "mean": (lambda s: float(np.mean(s)), lambda y: np.ones_like(y), lambda y: np.zeros_like(y)),
    "second_moment": (lambda s: float(np.mean(s ** 2)), lambda y: 2.0 * y, lambda y: 2.0 * np.ones_like(y)),
}


class Generator:
    uses_nu = False
    uses_measure = False
    uses_path = False

    def value(self, s: Slot, y, z) -> np.ndarray:
        raise NotImplementedError

    def dy(self, s: Slot, y, z) -> np.ndarray:
        raise NotImplementedError

    def dz(self, s: Slot, y, z) -> np.ndarray:
        raise NotImplementedError

    def d_omega(self, s: Slot, j, y, z, order=1):
        """Strong vertical derivative in omega at cut-off node j, time t_k."""
        raise NotImplementedError

    def mu_kernel_mean(self, s: Slot, j, y, z, tilde, order=1):
        """Average of the measure kernel (or its x~ derivative) over tilde paths."""
        raise NotImplementedError(f"{type(self).__name__} has no measure kernel")

    def nu_gateaux(self, s: Slot, y, z, direction) -> np.ndarray:
        """d/de f(..., nu + e * direction) at e = 0, atoms of nu moved individually."""
        raise NotImplementedError

    def nu_kernel(self, s: Slot, y, z, ytilde, order=1) -> np.ndarray:
        """d_nu f(.)(y~) (order 1) or d_y~ d_nu f (order 2), shape (B|1, P)."""
        raise NotImplementedError(f"{type(self).__name__} has no nu kernel at foreign points")

    def second_directional(self, s: Slot, j, y, z, dy, dz) -> np.ndarray:
        """Second derivative of e -> f(omega + e 1_[t_j,T], y + e dy, z + e dz)
        at e = 0 (d = 1), the source of the path-second variation."""
        raise NotImplementedError


def _zeros_like_z(z):
    return np.zeros_like(np.asarray(z, dtype=float))


class SeparableGenerator(Generator):
    """f = phi(y) + b.z + c_nu * stat(nu) + S(t, omega, mu) + const."""

    def __init__(self, phi: Optional[SmoothMap] = None, b=None, c_nu: float = 0.0,
                 stat: str = "mean", source: Optional[Functional] = None, const: float = 0.0):
        if stat not in NU_STATS:
            raise ValueError(f"unknown nu statistic {stat!r}; choose from {sorted(NU_STATS)}")
        self.phi = phi
        self.b = None if b is None else np.atleast_1d(np.asarray(b, dtype=float))
        self.c_nu = float(c_nu)
        self.stat = stat
        self.source = source
        self.const = float(const)
        self.uses_nu = self.c_nu != 0.0
        self.uses_measure = source is not None and source.uses_measure
        self.uses_path = source is not None and source.uses_path

    def __repr__(self):
        return (f"SeparableGenerator(phi={self.phi!r}, b={None if self.b is None else self.b.tolist()}, "
                f"c_nu={self.c_nu}, stat={self.stat}, source={self.source!r}, const={self.const})")

    def source_value(self, s: Slot) -> np.ndarray:
        B = s.paths.shape[0]
        out = np.full(B, self.const)
        if self.source is not None:
            out = out + self.source.value(s.grid, s.t, s.paths, s.measure)
        return out

    def value(self, s, y, z):
        y = np.asarray(y, dtype=float)
        out = self.source_value(s)
        if self.phi is not None:
            out = out + self.phi.value(y[:, None], s.t)
        if self.b is not None:
            out = out + np.asarray(z) @ self.b
        if self.c_nu:
            out = out + self.c_nu * NU_STATS[self.stat][0](s.nu)
        return np.asarray(out)

    def dy(self, s, y, z):
        y = np.asarray(y, dtype=float)
        if self.phi is None:
            return np.zeros_like(y)
        return self.phi.grad(y[:, None], s.t)[:, 0]

    def dz(self, s, y, z):
        z = np.asarray(z, dtype=float)
        if self.b is None:
            return np.zeros_like(z)
        return np.broadcast_to(self.b, z.shape).copy()

    def _bundle(self, s, j, tilde, order):
        if isinstance(self.source, FunctionalSpec):
            return self.source.bundle(s.grid, j, s.t, s.paths, s.measure, tilde, order=order, want_dt=False)
        if tilde is not None and tilde is not s.measure:
            raise NotImplementedError("opaque source: measure kernel only at the measure's own particles")
        log.warning("generator source %r has no analytic bundle; using finite differences", self.source)
        return fd_bundle(self.source, s.grid, j, s.t, np.asarray(s.paths),
                         None if s.measure is None else np.asarray(s.measure), FdConfig(),
                         with_measure=tilde is not None, order=order, want_dt=False)

    def d_omega(self, s, j, y, z, order=1):
        B, _, d = s.paths.shape
        if self.source is None or not self.source.uses_path or j > s.k:
            return np.zeros((B, d) if order == 1 else (B, d, d))
        b = self._bundle(s, j, None, order)
        return b.d_omega if order == 1 else b.d2_omega

    def mu_kernel_mean(self, s, j, y, z, tilde, order=1):
        B, _, d = s.paths.shape
        if self.source is None or not self.source.uses_measure or j > s.k:
            return np.zeros((B, d) if order == 1 else (B, d, d))
        b = self._bundle(s, j, tilde, order)
        return b.mu_mean() if order == 1 else b.mu2_mean()

    def nu_gateaux(self, s, y, z, direction):
        B = s.paths.shape[0]
        if not self.c_nu:
            return np.zeros(B)
        k1 = NU_STATS[self.stat][1](np.asarray(s.nu))
        return np.full(B, self.c_nu * float(np.mean(k1 * np.asarray(direction))))

    def nu_kernel(self, s, y, z, ytilde, order=1):
        ytilde = np.asarray(ytilde, dtype=float)
        fn = NU_STATS[self.stat][1 if order == 1 else 2]
        return (self.c_nu * fn(ytilde))[None, :]

    def second_directional(self, s, j, y, z, dy, dz):
        out = np.zeros(s.paths.shape[0])
        if self.phi is not None:
            out = out + self.phi.hess(np.asarray(y)[:, None], s.t)[:, 0, 0] * np.asarray(dy) ** 2
        if self.source is not None and self.source.uses_path and j <= s.k:
            out = out + self.d_omega(s, j, y, z, order=2)[:, 0, 0]
        return out


class CallableGenerator(Generator):
    """User generator fn(slot, y, z) -> (B,); derivatives by finite differences.

    The nu direction is handled by Gateaux differences of the empirical sample,
    so d_nu f is available only at the sample's own atoms.
    """

    def __init__(self, fn: Callable, uses_nu=True, uses_measure=True, uses_path=True, h: float = 1e-5):
        self.fn = fn
        self.uses_nu, self.uses_measure, self.uses_path = uses_nu, uses_measure, uses_path
        self.h = float(h)

    def value(self, s, y, z):
        return np.asarray(self.fn(s, np.asarray(y, dtype=float), np.asarray(z, dtype=float)), dtype=float)

    def dy(self, s, y, z):
        h = self.h * (1 + np.abs(y))
        return (self.value(s, y + h, z) - self.value(s, y - h, z)) / (2 * h)

    def dz(self, s, y, z):
        z = np.asarray(z, dtype=float)
        out = np.empty_like(z)
        for a in range(z.shape[1]):
            e = np.zeros_like(z)
            e[:, a] = self.h
            out[:, a] = (self.value(s, y, z + e) - self.value(s, y, z - e)) / (2 * self.h)
        return out

    def _bumped(self, s, j, x):
        P = np.array(s.paths, dtype=float, copy=True)
        P[:, j:, :] += x
        return Slot(s.grid, s.k, P, s.measure, s.nu)

    def d_omega(self, s, j, y, z, order=1):
        B, _, d = s.paths.shape
        if j > s.k or not self.uses_path:
            return np.zeros((B, d) if order == 1 else (B, d, d))
        h = self.h if order == 1 else 1e-3
        E = np.eye(d) * h
        if order == 1:
            return np.stack([(self.value(self._bumped(s, j, E[a]), y, z)
                              - self.value(self._bumped(s, j, -E[a]), y, z)) / (2 * h)
                             for a in range(d)], axis=1)
        f0 = self.value(s, y, z)
        out = np.empty((B, d, d))
        for a in range(d):
            for c in range(a + 1):
                if a == c:
                    out[:, a, a] = (self.value(self._bumped(s, j, E[a]), y, z) - 2 * f0
                                    + self.value(self._bumped(s, j, -E[a]), y, z)) / h ** 2
                else:
                    v = sum(sa * sc * self.value(self._bumped(s, j, sa * E[a] + sc * E[c]), y, z)
                            for sa in (1, -1) for sc in (1, -1)) / (4 * h ** 2)
                    out[:, a, c] = out[:, c, a] = v
        return out

    def nu_gateaux(self, s, y, z, direction):
        if not self.uses_nu:
            return np.zeros(np.shape(y))
        nu = np.asarray(s.nu, dtype=float)
        e = self.h * (1 + float(np.max(np.abs(nu))))
        up = Slot(s.grid, s.k, s.paths, s.measure, nu + e * np.asarray(direction))
        dn = Slot(s.grid, s.k, s.paths, s.measure, nu - e * np.asarray(direction))
        return (self.value(up, y, z) - self.value(dn, y, z)) / (2 * e)

    def second_directional(self, s, j, y, z, dy, dz):
        if s.paths.shape[2] != 1:
            raise NotImplementedError("path-second variation is implemented for d = 1")
        h = 1e-3

        def fe(e):
            ss = self._bumped(s, j, e) if (self.uses_path and j <= s.k) else s
            return self.value(ss, y + e * np.asarray(dy), z + e * np.asarray(dz))
        return (fe(h) - 2 * fe(0.0) + fe(-h)) / h ** 2
