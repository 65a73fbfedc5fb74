"""Smooth maps R^m -> R carrying value, gradient, Hessian and time derivative.

Inputs are arrays of shape (..., m); the optional time argument broadcasts
against the leading shape.  The registry names (polynomial, exp-scalar, sin,
affine) are the ones accepted by the config parser.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np


class SmoothMap:
    dim: int = 1
    registered: bool = True
    time_dependent: bool = False

    def value(self, x, t=0.0):
        raise NotImplementedError

    def grad(self, x, t=0.0):
        raise NotImplementedError

    def hess(self, x, t=0.0):
        raise NotImplementedError

    def dtime(self, x, t=0.0):
        return np.zeros(np.shape(x)[:-1])

    def lipschitz(self) -> float:
        """Global Lipschitz constant in the Euclidean norm (inf if unbounded)."""
        return math.inf

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"{type(self).__name__} expects trailing dimension {self.dim}, got {x.shape}")
        return x


class Affine(SmoothMap):
    def __init__(self, a, b=0.0):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = float(b)
        self.dim = self.a.size

    def value(self, x, t=0.0):
        return self._check(x) @ self.a + self.b

    def grad(self, x, t=0.0):
        x = self._check(x)
        return np.broadcast_to(self.a, x.shape).copy()

    def hess(self, x, t=0.0):
        x = self._check(x)
        return np.zeros(x.shape + (self.dim,))

    def lipschitz(self):
        return float(np.linalg.norm(self.a))

    def __repr__(self):
        return f"Affine(a={self.a.tolist()}, b={self.b})"


class Sine(SmoothMap):
    """c * sin(a.x + b)."""

    def __init__(self, c=1.0, a=1.0, b=0.0):
        self.c = float(c)
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = float(b)
        self.dim = self.a.size

    def value(self, x, t=0.0):
        return self.c * np.sin(self._check(x) @ self.a + self.b)

    def grad(self, x, t=0.0):
        u = self._check(x) @ self.a + self.b
        return (self.c * np.cos(u))[..., None] * self.a

    def hess(self, x, t=0.0):
        u = self._check(x) @ self.a + self.b
        return (-self.c * np.sin(u))[..., None, None] * np.outer(self.a, self.a)

    def lipschitz(self):
        return abs(self.c) * float(np.linalg.norm(self.a))

    def __repr__(self):
        return f"Sine(c={self.c}, a={self.a.tolist()}, b={self.b})"


class ExpScalar(SmoothMap):
    """c * exp(a.x + b)."""

    def __init__(self, c=1.0, a=1.0, b=0.0):
        self.c = float(c)
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = float(b)
        self.dim = self.a.size

    def value(self, x, t=0.0):
        return self.c * np.exp(self._check(x) @ self.a + self.b)

    def grad(self, x, t=0.0):
        return self.value(x)[..., None] * self.a

    def hess(self, x, t=0.0):
        return self.value(x)[..., None, None] * np.outer(self.a, self.a)

    def __repr__(self):
        return f"ExpScalar(c={self.c}, a={self.a.tolist()}, b={self.b})"


class Polynomial(SmoothMap):
    """Sum of monomials coef * t^p * prod_i x_i^{e_i}.

    terms: iterable of (coef, exponents) or (coef, exponents, time_power).
    """

    def __init__(self, terms, dim: Optional[int] = None):
        parsed = []
        for term in terms:
            coef, exps = term[0], tuple(int(e) for e in np.atleast_1d(term[1]))
            tp = int(term[2]) if len(term) > 2 else 0
            if any(e < 0 for e in exps) or tp < 0:
                raise ValueError("polynomial exponents must be non-negative")
            parsed.append((float(coef), exps, tp))
        if not parsed:
            raise ValueError("polynomial needs at least one term")
        dims = {len(e) for _, e, _ in parsed}
        if len(dims) != 1:
            raise ValueError("all polynomial terms need the same number of exponents")
        self.dim = dims.pop() if dim is None else int(dim)
        self.terms = parsed
        self.time_dependent = any(tp > 0 for _, _, tp in parsed)

    def _mono(self, x, exps, shift=None):
        out = np.ones(x.shape[:-1])
        for i, e in enumerate(exps):
            ee = e - (shift.count(i) if shift else 0)
            if ee < 0:
                return np.zeros(x.shape[:-1])
            if ee:
                out = out * x[..., i] ** ee
        return out

    @staticmethod
    def _falling(e, n):
        out = 1
        for j in range(n):
            out *= (e - j)
        return out

    def _tp(self, t, p, shape):
        return np.broadcast_to(np.asarray(t, dtype=float) ** p if p else 1.0, shape)

    def value(self, x, t=0.0):
        x = self._check(x)
        out = np.zeros(x.shape[:-1])
        for c, exps, tp in self.terms:
            out = out + c * self._tp(t, tp, out.shape) * self._mono(x, exps)
        return out

    def dtime(self, x, t=0.0):
        x = self._check(x)
        out = np.zeros(x.shape[:-1])
        for c, exps, tp in self.terms:
            if tp:
                out = out + c * tp * self._tp(t, tp - 1, out.shape) * self._mono(x, exps)
        return out

    def grad(self, x, t=0.0):
        x = self._check(x)
        out = np.zeros(x.shape)
        for c, exps, tp in self.terms:
            w = c * self._tp(t, tp, x.shape[:-1])
            for i, e in enumerate(exps):
                if e:
                    out[..., i] += w * e * self._mono(x, exps, [i])
        return out

    def hess(self, x, t=0.0):
        x = self._check(x)
        out = np.zeros(x.shape + (self.dim,))
        for c, exps, tp in self.terms:
            w = c * self._tp(t, tp, x.shape[:-1])
            for i, ei in enumerate(exps):
                for j, ej in enumerate(exps):
                    k = self._falling(ei, 2) if i == j else ei * ej
                    if k:
                        out[..., i, j] += w * k * self._mono(x, exps, [i, j])
        return out

    def lipschitz(self):
        if self.time_dependent or any(sum(e) > 1 for _, e, _ in self.terms):
            return math.inf
        a = np.zeros(self.dim)
        for c, exps, _ in self.terms:
            for i, e in enumerate(exps):
                if e == 1:
                    a[i] += c
        return float(np.linalg.norm(a))

    def __repr__(self):
        return f"Polynomial({self.terms})"


class CallableMap(SmoothMap):
    """User-supplied map.  Not from the registry, so growth is not certified."""

    registered = False

    def __init__(self, value: Callable, grad: Callable, hess: Callable,
                 dim: int = 1, dtime: Optional[Callable] = None):
        self._v, self._g, self._h, self._dt = value, grad, hess, dtime
        self.dim = int(dim)
        self.time_dependent = dtime is not None

    def value(self, x, t=0.0):
        return np.asarray(self._v(self._check(x), t), dtype=float)

    def grad(self, x, t=0.0):
        return np.asarray(self._g(self._check(x), t), dtype=float)

    def hess(self, x, t=0.0):
        return np.asarray(self._h(self._check(x), t), dtype=float)

    def dtime(self, x, t=0.0):
        if self._dt is None:
            return super().dtime(x, t)
        return np.asarray(self._dt(self._check(x), t), dtype=float)


# convenience constructors ------------------------------------------------------

def identity(dim: int = 1, i: int = 0) -> Affine:
    a = np.zeros(dim)
    a[i] = 1.0
    return Affine(a)


def constant(c: float, dim: int = 1) -> Affine:
    return Affine(np.zeros(dim), c)


def power(p: int, coef: float = 1.0) -> Polynomial:
    return Polynomial([(coef, (p,))])


REGISTRY = {
    "polynomial": lambda cfg: Polynomial(cfg["terms"], cfg.get("dim")),
    "exp-scalar": lambda cfg: ExpScalar(cfg.get("c", 1.0), cfg.get("a", 1.0), cfg.get("b", 0.0)),
    "sin": lambda cfg: Sine(cfg.get("c", 1.0), cfg.get("a", 1.0), cfg.get("b", 0.0)),
    "affine": lambda cfg: Affine(cfg.get("a", 1.0), cfg.get("b", 0.0)),
}


def map_from_config(cfg: dict, where: str = "map") -> SmoothMap:
    from ..errors import ConfigError

    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError(where, "smooth map needs a 'kind' key")
    kind = cfg["kind"]
    if kind not in REGISTRY:
        raise ConfigError(f"{where}.kind", f"unknown smooth map {kind!r}; choose from {sorted(REGISTRY)}")
    try:
        return REGISTRY[kind](cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(where, f"bad {kind} coefficients: {exc}") from exc
