"""Cylindrical functional DSL with analytic strong vertical derivatives.

A FunctionalSpec is an outer smooth combiner G(t, L_1, ..., L_n) of leaf
blocks.  Leaves are evaluated on batches:

    paths    (B, M+1, d)   the omega argument, one row per sample
    measure  (N, M+1, d)   particles of mu
    tilde    (P, M+1, d)   sample paths x~ at which measure derivatives are taken

Time t may fall between nodes (the horizontal difference quotient needs
f(t+h, omega_t, mu_t)); the running integrals are then exact integrals of the
step path.  Cut-off times tau are always grid nodes, passed as indices j.

Measure derivatives are returned in factored form (combiner gradient times a
per-leaf kernel over x~) so that E~[d_mu f(omega_b, x~_p) ...] costs O(B + P)
rather than O(B P).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import NonAnticipativityError
from ..pathspace import TimeGrid
from .smooth import Affine, SmoothMap


def _cells(grid: TimeGrid, t: float, kernel=None):
    """Weights of the cells [t_k, t_{k+1}) meeting [0, t) in positive length."""
    n = min(int(np.ceil(t / grid.dt - 1e-9)), grid.M) if t > 0 else 0
    w = grid.cell_lengths(t) if kernel is None else kernel.masses(grid, t)
    return w[:n], n


class Tracked(np.ndarray):
    """Array whose nodes 0..valid coincide with those of `source`.

    Integrands F(source) are cached in `cache` (shared between all tracked
    views of the same source), so running integrals over nodes <= valid cost
    a dot product instead of fresh map evaluations.  Plain copies (as made by
    the finite-difference bumps) drop the tracking automatically.  With
    stopped=True the caller also guarantees the array is stopped at `valid`.
    """

    def __new__(cls, arr, source, valid, cache, stopped=False):
        obj = np.asarray(arr).view(cls)
        obj.source = source
        obj.valid = int(valid)
        obj.cache = cache
        obj.is_stopped = stopped
        return obj

    def __array_finalize__(self, obj):
        self.source = getattr(obj, "source", None)
        self.valid = -1
        self.cache = getattr(obj, "cache", None)
        self.is_stopped = False


def track(arr, source=None, valid=None, cache=None, stopped=False):
    src = np.asarray(arr) if source is None else np.asarray(source)
    return Tracked(arr, src, src.shape[1] - 1 if valid is None else valid,
                   {} if cache is None else cache, stopped)


def _wsum(grid, arr, n, fn, w, j=0):
    """sum_{k=j}^{n-1} fn(arr[:, k], t_k) w_k, cached for tracked arrays."""
    w = np.asarray(w)
    j = max(int(j), 0)
    if n <= j:
        probe = fn(np.asarray(arr)[:, :1, :], grid.nodes[:1][None, :])
        return np.zeros(probe.shape[:1] + probe.shape[2:])
    if not (isinstance(arr, Tracked) and arr.source is not None and arr.valid >= 0):
        g = fn(np.asarray(arr)[:, j:n, :], grid.nodes[j:n][None, :])
        return np.tensordot(w[j:n], g, axes=(0, 1))
    key = (id(fn.__self__), fn.__func__.__name__)
    hit = arr.cache.get(key)
    if hit is None:
        vals = np.moveaxis(np.asarray(fn(arr.source, grid.nodes[None, :])), 1, 0)
        pre = np.concatenate([np.zeros((1,) + vals.shape[1:]), np.cumsum(vals, axis=0)])
        hit = arr.cache[key] = (np.ascontiguousarray(vals), pre)
    vals, pre = hit
    v = arr.valid
    m = min(n, v + 1)
    out = 0.0
    if m - 1 > j and np.allclose(w[j:m - 1], grid.dt, rtol=1e-12, atol=0):
        # uniform cells: prefix sums, then the (possibly partial) last cell
        out = grid.dt * (pre[m - 1] - pre[j]) + w[m - 1] * vals[m - 1]
    elif m > j:
        out = np.tensordot(w[j:m], vals[j:m], axes=(0, 0))
    if n - 1 <= v:
        return out
    lo = max(j, v + 1)
    raw = np.asarray(arr)
    if arr.is_stopped and not getattr(fn.__self__, "time_dependent", True):
        tail = fn(raw[:, v, :], grid.nodes[v]) * w[lo:n].sum()
    else:
        tail = np.tensordot(w[lo:n], fn(raw[:, lo:n, :], grid.nodes[lo:n][None, :]), axes=(0, 1))
    return out + tail


def _density(t: float, kernel=None) -> float:
    return 1.0 if kernel is None else float(kernel.density(t))


# --- leaves ---------------------------------------------------------------------

class Leaf:
    uses_path = False
    uses_measure = False
    terminal_only = False

    def value(self, grid, t, paths, measure):
        raise NotImplementedError

    def dt(self, grid, t, paths, measure):
        raise NotImplementedError

    def d_omega(self, grid, j, t, paths, measure):
        return np.zeros(paths.shape[:1] + paths.shape[2:])

    def d2_omega(self, grid, j, t, paths, measure):
        d = paths.shape[2]
        return np.zeros((paths.shape[0], d, d))

    def d_mu(self, grid, j, t, paths, measure, tilde):
        return np.zeros((1, 1, tilde.shape[2]))

    def d2_mu(self, grid, j, t, paths, measure, tilde):
        d = tilde.shape[2]
        return np.zeros((1, 1, d, d))

    def statistics(self, grid, t, paths):
        """Path statistics usable as regression features."""
        return []

    def maps(self):
        return []


@dataclass(frozen=True)
class PathEval(Leaf):
    """h(t, omega(t))."""
    h: SmoothMap
    uses_path = True

    def _x(self, grid, t, paths):
        return paths[:, grid.floor_index(t), :]

    def value(self, grid, t, paths, measure):
        return self.h.value(self._x(grid, t, paths), t)

    def dt(self, grid, t, paths, measure):
        return self.h.dtime(self._x(grid, t, paths), t)

    def d_omega(self, grid, j, t, paths, measure):
        return self.h.grad(self._x(grid, t, paths), t)

    def d2_omega(self, grid, j, t, paths, measure):
        return self.h.hess(self._x(grid, t, paths), t)

    def maps(self):
        return [self.h]


@dataclass(frozen=True)
class FrozenEval(Leaf):
    """h(omega(t0)) at a fixed time t0; admissible only for t >= t0."""
    h: SmoothMap
    t0: float
    uses_path = True
    terminal_only = True

    def _k0(self, grid, t):
        if t < self.t0 - 1e-12:
            raise NonAnticipativityError(f"FrozenEval at t0={self.t0} read at earlier time t={t}")
        return grid.floor_index(self.t0)

    def value(self, grid, t, paths, measure):
        return self.h.value(paths[:, self._k0(grid, t), :])

    def dt(self, grid, t, paths, measure):
        self._k0(grid, t)
        return np.zeros(paths.shape[0])

    def d_omega(self, grid, j, t, paths, measure):
        k0 = self._k0(grid, t)
        g = self.h.grad(paths[:, k0, :])
        return g if j <= k0 else np.zeros_like(g)

    def d2_omega(self, grid, j, t, paths, measure):
        k0 = self._k0(grid, t)
        hh = self.h.hess(paths[:, k0, :])
        return hh if j <= k0 else np.zeros_like(hh)

    def statistics(self, grid, t, paths):
        k = min(grid.floor_index(t), grid.floor_index(self.t0))
        return list(paths[:, k, :].T)

    def maps(self):
        return [self.h]


@dataclass(frozen=True)
class RunningIntegral(Leaf):
    """int_0^t F(r, omega(r)) kernel(r) dr on the step path (left-point in r)."""
    F: SmoothMap
    kernel: object = None
    uses_path = True

    def _sum(self, grid, t, paths, fn, j=0):
        w, n = _cells(grid, t, self.kernel)
        return _wsum(grid, paths, n, fn, w, j)

    def value(self, grid, t, paths, measure):
        return self._sum(grid, t, paths, self.F.value)

    def dt(self, grid, t, paths, measure):
        k = grid.floor_index(t)
        if k >= grid.M:
            k = grid.M - 1
        return _density(t, self.kernel) * self.F.value(paths[:, k, :], grid.time(k))

    def d_omega(self, grid, j, t, paths, measure):
        return self._sum(grid, t, paths, self.F.grad, j)

    def d2_omega(self, grid, j, t, paths, measure):
        return self._sum(grid, t, paths, self.F.hess, j)

    def statistics(self, grid, t, paths):
        return [self.value(grid, t, paths, None)]

    def maps(self):
        return [self.F]


@dataclass(frozen=True)
class MeasureEval(Leaf):
    """E^mu[h(t, W(t))]."""
    h: SmoothMap
    uses_measure = True

    def value(self, grid, t, paths, measure):
        return float(np.mean(self.h.value(measure[:, grid.floor_index(t), :], t)))

    def dt(self, grid, t, paths, measure):
        return float(np.mean(self.h.dtime(measure[:, grid.floor_index(t), :], t)))

    def d_mu(self, grid, j, t, paths, measure, tilde):
        return self.h.grad(tilde[:, grid.floor_index(t), :], t)[None]

    def d2_mu(self, grid, j, t, paths, measure, tilde):
        return self.h.hess(tilde[:, grid.floor_index(t), :], t)[None]

    def maps(self):
        return [self.h]


@dataclass(frozen=True)
class MeasureIntegral(Leaf):
    """E^mu[int_0^t F(r, W(r)) kernel(r) dr]."""
    F: SmoothMap
    kernel: object = None
    uses_measure = True

    def _sum(self, grid, t, arr, fn, j=0):
        w, n = _cells(grid, t, self.kernel)
        return _wsum(grid, arr, n, fn, w, j)

    def value(self, grid, t, paths, measure):
        return float(np.mean(self._sum(grid, t, measure, self.F.value)))

    def dt(self, grid, t, paths, measure):
        k = min(grid.floor_index(t), grid.M - 1)
        return _density(t, self.kernel) * float(np.mean(self.F.value(measure[:, k, :], grid.time(k))))

    def d_mu(self, grid, j, t, paths, measure, tilde):
        return self._sum(grid, t, tilde, self.F.grad, j)[None]

    def d2_mu(self, grid, j, t, paths, measure, tilde):
        return self._sum(grid, t, tilde, self.F.hess, j)[None]

    def maps(self):
        return [self.F]


@dataclass(frozen=True)
class MeasureComposite(Leaf):
    """E^mu[f4(W(t), int_0^t f5(W(r)) dr)] with f4 on R^{d+1}, f5 on R^d."""
    f4: SmoothMap
    f5: SmoothMap
    uses_measure = True

    def _y(self, grid, t, arr):
        w, n = _cells(grid, t)
        I = _wsum(grid, arr, n, self.f5.value, w)
        x = np.asarray(arr)[:, grid.floor_index(t), :]
        return np.concatenate([x, I[:, None]], axis=1)

    def _J(self, grid, j, t, arr, fn):
        w, n = _cells(grid, t)
        return _wsum(grid, arr, n, fn, w, j)

    def value(self, grid, t, paths, measure):
        return float(np.mean(self.f4.value(self._y(grid, t, measure), t)))

    def dt(self, grid, t, paths, measure):
        y = self._y(grid, t, measure)
        k = min(grid.floor_index(t), grid.M - 1)
        f5 = self.f5.value(measure[:, k, :], grid.time(k))
        g = self.f4.grad(y, t)
        return float(np.mean(g[:, -1] * f5 + self.f4.dtime(y, t)))

    def d_mu(self, grid, j, t, paths, measure, tilde):
        y = self._y(grid, t, tilde)
        g = self.f4.grad(y, t)
        J = self._J(grid, j, t, tilde, self.f5.grad)
        return (g[:, :-1] + g[:, -1:] * J)[None]

    def d2_mu(self, grid, j, t, paths, measure, tilde):
        y = self._y(grid, t, tilde)
        g = self.f4.grad(y, t)
        H = self.f4.hess(y, t)
        J = self._J(grid, j, t, tilde, self.f5.grad)
        J2 = self._J(grid, j, t, tilde, self.f5.hess)
        h12 = H[:, :-1, -1]
        out = (H[:, :-1, :-1]
               + h12[:, :, None] * J[:, None, :] + J[:, :, None] * h12[:, None, :]
               + H[:, -1, -1][:, None, None] * J[:, :, None] * J[:, None, :]
               + g[:, -1][:, None, None] * J2)
        return out[None]

    def maps(self):
        return [self.f4, self.f5]


@dataclass(frozen=True)
class DoubleMollified(Leaf):
    """int_0^t int_0^t g(omega(r1), E^mu[W(r2)]) rho(r1) rho(r2) dr1 dr2.

    g acts on R^{2d}: first d slots the path value, last d the measure mean.
    Only cells where the kernel has mass are visited.
    """
    g: SmoothMap
    kernel: object
    uses_path = True
    uses_measure = True

    def _parts(self, grid, t, paths, measure):
        w, n = _cells(grid, t, self.kernel)
        act = np.nonzero(w > 0)[0]
        d = paths.shape[2]
        x = paths[:, act, :]                       # (B, A, d)
        m = measure[:, act, :].mean(axis=0)        # (A, d)
        B, A = x.shape[0], act.size
        z = np.concatenate([np.broadcast_to(x[:, :, None, :], (B, A, A, d)),
                            np.broadcast_to(m[None, None, :, :], (B, A, A, d))], axis=-1)
        return act, w[act], z

    def value(self, grid, t, paths, measure):
        act, w, z = self._parts(grid, t, paths, measure)
        if act.size == 0:
            return np.zeros(paths.shape[0])
        return np.einsum("bkl,k,l->b", self.g.value(z), w, w)

    def dt(self, grid, t, paths, measure):
        rho = _density(t, self.kernel)
        if rho == 0.0:
            return np.zeros(paths.shape[0])
        k = min(grid.floor_index(t), grid.M - 1)
        d = paths.shape[2]
        w, n = _cells(grid, t, self.kernel)
        xk = paths[:, k, :]
        mk = measure[:, k, :].mean(axis=0)
        xs = paths[:, :n, :]
        ms = measure[:, :n, :].mean(axis=0)
        B = paths.shape[0]
        z1 = np.concatenate([np.broadcast_to(xk[:, None, :], (B, n, d)),
                             np.broadcast_to(ms[None], (B, n, d))], axis=-1)
        z2 = np.concatenate([xs, np.broadcast_to(mk, (B, n, d))], axis=-1)
        return rho * (self.g.value(z1) @ w + self.g.value(z2) @ w)

    def d_omega(self, grid, j, t, paths, measure):
        act, w, z = self._parts(grid, t, paths, measure)
        d = paths.shape[2]
        if act.size == 0:
            return np.zeros((paths.shape[0], d))
        gx = self.g.grad(z)[..., :d]
        mask = (act >= j).astype(float) * w
        return np.einsum("bkld,k,l->bd", gx, mask, w)

    def d2_omega(self, grid, j, t, paths, measure):
        act, w, z = self._parts(grid, t, paths, measure)
        d = paths.shape[2]
        if act.size == 0:
            return np.zeros((paths.shape[0], d, d))
        hx = self.g.hess(z)[..., :d, :d]
        mask = (act >= j).astype(float) * w
        return np.einsum("bklde,k,l->bde", hx, mask, w)

    def d_mu(self, grid, j, t, paths, measure, tilde):
        act, w, z = self._parts(grid, t, paths, measure)
        d = paths.shape[2]
        if act.size == 0:
            return np.zeros((1, 1, d))
        gm = self.g.grad(z)[..., d:]
        mask = (act >= j).astype(float) * w
        return np.einsum("bkld,k,l->bd", gm, w, mask)[:, None, :]

    def maps(self):
        return [self.g]


# --- bundle ---------------------------------------------------------------------

def _pmean(arr, weights=None):
    """Mean over the particle axis (axis 1) of arr (Bl, Pl, ...) with optional
    per-particle weights of shape (P,) or (P, ...)."""
    if arr.shape[1] == 1:
        out = arr[:, 0]
        if weights is not None:
            out = out * np.mean(weights, axis=0)
        return out
    if weights is None:
        return arr.mean(axis=1)
    w = np.asarray(weights)
    w = w.reshape((1,) + w.shape + (1,) * (arr.ndim - 1 - w.ndim))
    return (arr * w).mean(axis=1)


@dataclass
class DerivativeBundle:
    """Derivatives of f at (tau, t) for a batch of B paths.

    Measure derivatives are kept as terms (coef_l (B,), K1_l, K2_l) with
    K1_l of shape (B|1, P|1, d) and K2_l of shape (B|1, P|1, d, d):
        d_mu f(omega_b, x~_p) = sum_l coef_l[b] K1_l[b, p].
    """
    tau: float
    t: float
    value: np.ndarray
    dt: Optional[np.ndarray] = None
    d_omega: Optional[np.ndarray] = None
    d2_omega: Optional[np.ndarray] = None
    mu_terms: list = field(default_factory=list)
    n_tilde: int = 0
    modes: dict = field(default_factory=dict)

    @property
    def B(self):
        return self.value.shape[0]

    def _sum(self, fn, order):
        out = None
        for coef, K1, K2 in self.mu_terms:
            K = K1 if order == 1 else K2
            if K is None:
                continue
            r = fn(K)
            r = coef.reshape((-1,) + (1,) * (r.ndim - 1)) * r
            out = r if out is None else out + r
        return out

    def _finish(self, out, shape):
        if out is None:
            return np.zeros(shape)
        return np.broadcast_to(out, shape).copy()

    def d_mu(self) -> np.ndarray:
        """Full kernel (B, P, d)."""
        d = self.d_omega.shape[-1] if self.d_omega is not None else 1
        out = self._sum(lambda K: K, 1)
        return self._finish(out, (self.B, self.n_tilde, d))

    def d2_mu(self) -> np.ndarray:
        d = self.d_omega.shape[-1] if self.d_omega is not None else 1
        out = self._sum(lambda K: K, 2)
        return self._finish(out, (self.B, self.n_tilde, d, d))

    def mu_mean(self, weights=None) -> np.ndarray:
        """E~[d_mu f(omega_b, x~) w(x~)] over the tilde sample, shape (B, d)."""
        d = self.d_omega.shape[-1] if self.d_omega is not None else 1
        return self._finish(self._sum(lambda K: _pmean(K, weights), 1), (self.B, d))

    def mu2_mean(self, weights=None) -> np.ndarray:
        d = self.d_omega.shape[-1] if self.d_omega is not None else 1
        return self._finish(self._sum(lambda K: _pmean(K, weights), 2), (self.B, d, d))

    def mu_dot(self, inc: np.ndarray) -> np.ndarray:
        """E~[d_mu f(omega_b, x~_p) . inc_p], shape (B,)."""
        inc = np.asarray(inc, dtype=float)
        out = self._sum(lambda K: _pmean(np.sum(K * inc[None], axis=-1))
                        if K.shape[1] > 1 else K[:, 0] @ inc.mean(axis=0), 1)
        return self._finish(out, (self.B,))

    def mu2_trace(self, A) -> np.ndarray:
        """E~[Tr(d_x~ d_mu f(omega_b, x~_p) A_p)], A of shape (d, d) or (P, d, d)."""
        A = np.asarray(A, dtype=float)

        def red(K):
            if A.ndim == 2:
                return _pmean(np.einsum("bpde,ed->bp", K, A))
            if K.shape[1] == 1:
                return np.einsum("bde,ed->b", K[:, 0], A.mean(axis=0))
            return _pmean(np.einsum("bpde,ped->bp", K, A))
        return self._finish(self._sum(red, 2), (self.B,))


class Functional:
    """Interface shared by the DSL and opaque functionals."""
    uses_path = True
    uses_measure = True
    analytic = False

    def value(self, grid, t, paths, measure=None):
        raise NotImplementedError

    def statistics(self, grid, t, paths):
        return []


class FunctionalSpec(Functional):
    analytic = True

    def __init__(self, combiner: SmoothMap, leaves: Sequence[Leaf], name: str = ""):
        leaves = tuple(leaves)
        if combiner.dim != len(leaves):
            raise ValueError(f"combiner arity {combiner.dim} != {len(leaves)} leaves")
        self.combiner = combiner
        self.leaves = leaves
        self.name = name
        self.uses_path = any(l.uses_path for l in leaves)
        self.uses_measure = any(l.uses_measure for l in leaves)
        self.terminal_only = any(l.terminal_only for l in leaves)
        unregistered = [m for l in leaves for m in l.maps() if not m.registered]
        if not combiner.registered:
            unregistered.append(combiner)
        self.growth_certified = not unregistered
        if unregistered:
            warnings.warn("functional uses smooth maps outside the registry; "
                          "polynomial growth is not certified", stacklevel=2)

    def __repr__(self):
        return f"FunctionalSpec({self.name or type(self.combiner).__name__}, {len(self.leaves)} leaves)"

    def _leaf_values(self, grid, t, paths, measure):
        B = paths.shape[0]
        cols = []
        for leaf in self.leaves:
            if leaf.uses_measure and measure is None:
                raise ValueError("functional reads the measure argument but none was given")
            v = leaf.value(grid, t, paths, measure)
            cols.append(np.broadcast_to(np.asarray(v, dtype=float), (B,)))
        return np.stack(cols, axis=1)

    def value(self, grid, t, paths, measure=None):
        L = self._leaf_values(grid, t, paths, measure)
        return self.combiner.value(L, t)

    def statistics(self, grid, t, paths):
        out = []
        for leaf in self.leaves:
            out.extend(leaf.statistics(grid, t, paths))
        return out

    def time_derivative(self, grid, t, paths, measure=None):
        L = self._leaf_values(grid, t, paths, measure)
        G = self.combiner.grad(L, t)
        out = np.broadcast_to(self.combiner.dtime(L, t), (paths.shape[0],)).copy()
        for i, leaf in enumerate(self.leaves):
            out = out + G[:, i] * leaf.dt(grid, t, paths, measure)
        return out

    def bundle(self, grid, j, t, paths, measure=None, tilde=None, order=2,
               want_dt=True) -> DerivativeBundle:
        """Analytic bundle at cut-off node j and time t for B paths."""
        if grid.time(j) > t + 1e-12:
            raise ValueError(f"cut-off tau={grid.time(j)} after t={t}")
        B, _, d = paths.shape
        n = len(self.leaves)
        L = self._leaf_values(grid, t, paths, measure)
        G = self.combiner.grad(L, t)                     # (B, n)
        H = self.combiner.hess(L, t) if order >= 2 else None
        val = self.combiner.value(L, t)

        dt = None
        if want_dt:
            dt = np.broadcast_to(self.combiner.dtime(L, t), (B,)).copy()
            for i, leaf in enumerate(self.leaves):
                dt = dt + G[:, i] * leaf.dt(grid, t, paths, measure)

        dom = np.zeros((B, n, d))
        for i, leaf in enumerate(self.leaves):
            if leaf.uses_path:
                dom[:, i] = leaf.d_omega(grid, j, t, paths, measure)
        d_omega = np.einsum("bi,bid->bd", G, dom)
        d2 = None
        if order >= 2:
            d2 = np.einsum("bij,bid,bje->bde", H, dom, dom)
            for i, leaf in enumerate(self.leaves):
                if leaf.uses_path:
                    d2 = d2 + G[:, i, None, None] * leaf.d2_omega(grid, j, t, paths, measure)

        terms = []
        if tilde is not None:
            for i, leaf in enumerate(self.leaves):
                if leaf.uses_measure:
                    K1 = leaf.d_mu(grid, j, t, paths, measure, tilde)
                    K2 = leaf.d2_mu(grid, j, t, paths, measure, tilde) if order >= 2 else None
                    terms.append((G[:, i], K1, K2))
        return DerivativeBundle(tau=grid.time(j), t=t, value=val, dt=dt, d_omega=d_omega,
                                d2_omega=d2, mu_terms=terms,
                                n_tilde=0 if tilde is None else tilde.shape[0],
                                modes={"dt": "analytic", "d_omega": "analytic", "d_mu": "analytic"})

    def lipschitz_bound(self, T: float) -> float:
        """Sup-norm Lipschitz constant in omega when it can be certified."""
        if not isinstance(self.combiner, Affine):
            return np.inf
        weights = np.abs(self.combiner.a)
        total = 0.0
        for w, leaf in zip(weights, self.leaves):
            if not leaf.uses_path or w == 0:
                continue
            if isinstance(leaf, (PathEval, FrozenEval)):
                total += w * leaf.h.lipschitz()
            elif isinstance(leaf, RunningIntegral) and leaf.kernel is None:
                total += w * leaf.F.lipschitz() * T
            else:
                return np.inf
        return total


class OpaqueFunctional(Functional):
    """Evaluate-only functional; every derivative comes from finite differences.

    fn(grid, t, paths, measure) -> array (B,), must be non-anticipative.
    """

    def __init__(self, fn, uses_path=True, uses_measure=True, name=""):
        self.fn = fn
        self.uses_path = uses_path
        self.uses_measure = uses_measure
        self.name = name

    def value(self, grid, t, paths, measure=None):
        return np.asarray(self.fn(grid, t, paths, measure), dtype=float).reshape(paths.shape[0])


# --- constructors ------------------------------------------------------------------

def single(leaf: Leaf, name: str = "") -> FunctionalSpec:
    from .smooth import identity
    return FunctionalSpec(identity(1), [leaf], name=name)


def constant_functional(c: float) -> FunctionalSpec:
    from .smooth import constant
    return FunctionalSpec(constant(c, 1), [PathEval(constant(0.0, 1))], name=f"const{c}")


def example_composite(F: SmoothMap, f1, f2, f3, f4, f5) -> FunctionalSpec:
    """F(t, omega(t), int f1(omega), E[f2(W(t))], E[int f3(W)], E[f4(W(t), int f5(W))])."""
    d = f1.dim
    return FunctionalSpec(F, [PathEval(Affine(np.eye(d)[0])),
                              RunningIntegral(f1), MeasureEval(f2), MeasureIntegral(f3),
                              MeasureComposite(f4, f5)], name="composite")
