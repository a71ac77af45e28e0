"""Real trigonometric polynomials on the 2-torus with exact derivatives.

A polynomial is a finite sum of terms

    a_cos * cos(2*pi*(k*x + l*theta)) + a_sin * sin(2*pi*(k*x + l*theta))

indexed by integer frequency pairs (k, l).  All partial derivatives are
closed forms: each d/dx multiplies a term by 2*pi*k and rotates
(a_cos, a_sin) -> (a_sin, -a_cos), and likewise d/dtheta with 2*pi*l.
Sums of per-term amplitudes give certified sup-norm bounds.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi

# (a_cos, a_sin) rotation applied once per derivative order.
_ROT = ((1, 0), (0, -1), (-1, 0), (0, 1))


def _rotate(ac, asn, m):
    """m-fold derivative rotation of the coefficient pair."""
    m %= 4
    if m == 0:
        return ac, asn
    if m == 1:
        return asn, -ac
    if m == 2:
        return -ac, -asn
    return -asn, ac


class TrigPoly2:
    """Trigonometric polynomial sum_{(k,l)} a_cos*cos(2pi(kx+lθ)) + a_sin*sin(2pi(kx+lθ)).

    Parameters
    ----------
    terms : dict[(int, int), (float, float)]
        Map from frequency pair (k, l) to coefficients (a_cos, a_sin).
        Zero terms may be included; they are kept verbatim so that file
        round trips are bit-exact.
    """

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for (k, l), (ac, asn) in dict(terms).items():
                self.terms[(int(k), int(l))] = (float(ac), float(asn))
        items = sorted(self.terms.items())
        self._k = np.array([k for (k, _), _ in items], dtype=float)
        self._l = np.array([l for (_, l), _ in items], dtype=float)
        self._ac = np.array([ac for _, (ac, _) in items], dtype=float)
        self._as = np.array([asn for _, (_, asn) in items], dtype=float)
        self.max_degree = int(max((abs(k) + abs(l) for (k, l) in self.terms), default=0))
        # precomputed derivative coefficient tables for orders dx+dt <= 3
        self._tables = {}
        for dx in range(4):
            for dt in range(4 - dx):
                ac, asn = _rotate(self._ac, self._as, dx + dt)
                fac = (TWO_PI * self._k) ** dx * (TWO_PI * self._l) ** dt
                self._tables[(dx, dt)] = (ac * fac, asn * fac)

    def __eq__(self, other):
        return isinstance(other, TrigPoly2) and self.terms == other.terms

    def __repr__(self):
        return f"TrigPoly2({self.terms!r})"

    def scaled(self, c):
        """Return c * self (exact coefficient scaling)."""
        return TrigPoly2({kl: (c * ac, c * asn) for kl, (ac, asn) in self.terms.items()})

    def deriv_eval(self, x, theta, dx=0, dt=0):
        """Evaluate the exact partial derivative d^dx_x d^dt_theta at (x, theta).

        Vectorized over broadcastable array arguments.
        """
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(np.broadcast(x, theta).shape, dtype=float)
        if self._k.size == 0:
            return out if out.ndim else float(out)
        ac, asn = self._tables[(dx, dt)]
        for i in range(self._k.size):
            if ac[i] == 0.0 and asn[i] == 0.0:
                continue
            phase = TWO_PI * (self._k[i] * x + self._l[i] * theta)
            if ac[i] != 0.0 and asn[i] != 0.0:
                out = out + ac[i] * np.cos(phase) + asn[i] * np.sin(phase)
            elif ac[i] != 0.0:
                out = out + ac[i] * np.cos(phase)
            else:
                out = out + asn[i] * np.sin(phase)
        return out if out.ndim else float(out)

    def __call__(self, x, theta):
        return self.deriv_eval(x, theta, 0, 0)

    def sup_bound(self, dx=0, dt=0):
        """Certified upper bound for sup |d^dx_x d^dt_theta self|.

        Per-term amplitude hypot(a_cos, a_sin) times the derivative factor,
        summed over terms (triangle inequality).
        """
        if self._k.size == 0:
            return 0.0
        amp = np.hypot(self._ac, self._as)
        fac = (TWO_PI * np.abs(self._k)) ** dx * (TWO_PI * np.abs(self._l)) ** dt
        return float(np.sum(amp * fac))

    def jet(self, x, theta, order):
        """All partial derivatives up to total order `order` (<= 3).

        Returns a dict {(dx, dt): value-array}.
        """
        if not 0 <= order <= 3:
            raise ValueError("jet order must be in 0..3")
        out = {}
        for m in range(order + 1):
            for dx in range(m + 1):
                out[(dx, m - dx)] = self.deriv_eval(x, theta, dx, m - dx)
        return out
