"""Chebyshev helpers shared by the curve/density machinery.

Curves and densities live as Chebyshev series on lift intervals [a, b];
nodes are Chebyshev extrema (endpoints included), quadrature is
Clenshaw-Curtis, and inverse-CDF sampling inverts the series antiderivative.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as C

DEGREE = 32  # curves/densities are series of degree <= 32 (33 nodes)


@lru_cache(maxsize=32)
def _nodes_unit(m):
    """m Chebyshev extrema of [-1, 1], ascending."""
    return -np.cos(np.pi * np.arange(m) / (m - 1))


@lru_cache(maxsize=32)
def _vals2coef_matrix(m):
    """Matrix mapping values at extrema nodes to Chebyshev coefficients."""
    V = C.chebvander(_nodes_unit(m), m - 1)
    return np.linalg.inv(V)


@lru_cache(maxsize=32)
def cc_weights(m):
    """Clenshaw-Curtis weights for m extrema nodes on [-1, 1]."""
    n = m - 1
    w = np.zeros(m)
    ks = np.arange(1, n // 2 + 1)
    for j in range(m):
        s = 1.0 - np.sum(
            np.where(2 * ks == n, 1.0, 2.0) * np.cos(2 * ks * j * np.pi / n)
            / (4.0 * ks * ks - 1.0)
        )
        w[j] = 2.0 * s / n
    w[0] /= 2.0
    w[-1] /= 2.0
    return w


def nodes(m, a, b):
    """m Chebyshev extrema mapped to [a, b], ascending."""
    return 0.5 * (a + b) + 0.5 * (b - a) * _nodes_unit(m)


def fit(values, a, b):
    """Chebyshev coefficients (domain [a, b]) interpolating values at nodes(m, a, b)."""
    values = np.asarray(values, dtype=float)
    return _vals2coef_matrix(values.shape[-1]) @ values


def fit2d(values):
    """2D coefficient tensor from values on the extrema product grid.

    values[i, j] is the sample at (eta_i, x_j); the result is used with
    chebval2d in scaled coordinates.
    """
    values = np.asarray(values, dtype=float)
    Mi = _vals2coef_matrix(values.shape[0])
    Mj = _vals2coef_matrix(values.shape[1])
    return Mi @ values @ Mj.T


def scale(x, a, b):
    return (2.0 * np.asarray(x, dtype=float) - (a + b)) / (b - a)


def chop(coef, rel=1e-13):
    """Drop trailing coefficients below rel*max|coef| (interpolation noise).

    High-order coefficients of a smooth function on a short interval sit far
    below the evaluation noise floor; keeping them would corrupt derivative
    measurements by factors of (2/(b-a))^k.
    """
    coef = np.asarray(coef, dtype=float)
    scale = np.max(np.abs(coef))
    if scale == 0.0:
        return coef[:1]
    keep = np.nonzero(np.abs(coef) >= rel * scale)[0]
    return coef[: keep[-1] + 1]


class ChebFun:
    """Chebyshev series on a lift interval [a, b]."""

    __slots__ = ("a", "b", "coef")

    def __init__(self, coef, a, b):
        self.coef = np.asarray(coef, dtype=float)
        self.a = float(a)
        self.b = float(b)

    @classmethod
    def from_values(cls, values, a, b):
        return cls(chop(fit(values, a, b)), a, b)

    @classmethod
    def from_callable(cls, fn, a, b, m=DEGREE + 1):
        xs = nodes(m, a, b)
        return cls.from_values(fn(xs), a, b)

    @property
    def length(self):
        return self.b - self.a

    def __call__(self, x):
        return C.chebval(scale(x, self.a, self.b), self.coef)

    def deriv(self, k=1):
        c = self.coef
        for _ in range(k):
            c = C.chebder(c) * (2.0 / (self.b - self.a))
        return ChebFun(c if len(c) else np.zeros(1), self.a, self.b)

    def antideriv(self):
        c = C.chebint(self.coef) * ((self.b - self.a) / 2.0)
        return ChebFun(c, self.a, self.b)

    def integral(self):
        P = self.antideriv()
        return P(self.b) - P(self.a)

    def sup_on_nodes(self, m=65):
        return float(np.max(np.abs(self(nodes(m, self.a, self.b)))))

    def scaled(self, c):
        return ChebFun(self.coef * c, self.a, self.b)

    def restricted(self, a2, b2, m=DEGREE + 1):
        return ChebFun.from_values(self(nodes(m, a2, b2)), a2, b2)

    def translated(self, dx, dv=0.0):
        """Same function shifted: x -> x - dx in the domain, values shifted by dv."""
        c = self.coef.copy()
        c[0] += dv
        return ChebFun(c, self.a + dx, self.b + dx)

    def tail_magnitude(self, count=3):
        """Max |coef| among the trailing `count` coefficients (projection error proxy)."""
        if len(self.coef) <= count:
            return 0.0
        return float(np.max(np.abs(self.coef[-count:])))


def cc_integrate(fn_vals, a, b):
    """Clenshaw-Curtis integral of values sampled at nodes(m, a, b)."""
    fn_vals = np.asarray(fn_vals, dtype=float)
    m = fn_vals.shape[-1]
    return (b - a) / 2.0 * (fn_vals @ cc_weights(m))


def invert_monotone(fn, dfn, targets, lo, hi, tol=1e-13, max_iter=100):
    """Vectorized safeguarded Newton for strictly increasing fn on [lo, hi]."""
    targets = np.asarray(targets, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), targets.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), targets.shape).copy()
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        r = fn(x) - targets
        if np.all(np.abs(r) < tol):
            return x
        pos = r > 0
        hi = np.where(pos, np.minimum(hi, x), hi)
        lo = np.where(~pos, np.maximum(lo, x), lo)
        xn = x - r / dfn(x)
        bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
        x = np.where(bad, 0.5 * (lo + hi), xn)
    raise RuntimeError("invert_monotone did not converge")


def sample_from_density(rho, n, rng):
    """Inverse-CDF samples from a positive ChebFun density (not necessarily normalized)."""
    P = rho.antideriv()
    p0 = P(rho.a)
    mass = P(rho.b) - p0
    u = rng.random(n) * mass + p0
    return invert_monotone(P, rho, u, rho.a, rho.b, tol=1e-12 * max(1.0, mass))
