"""Periodic orbits of the fibre maps and the span test for near-coboundaries.

If a nonzero combination a*omega + b*psi_* were cohomologous to a constant
for f_theta, every f_theta-invariant measure would give it the same average.
Three (or more) periodic orbits whose Birkhoff-average pairs have
differences spanning the plane rule that out; the margin reported here is
the second singular value of the difference matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .slopes import slope_s_star0
from .system import wrap

ORBIT_RESIDUAL_TOL = 1e-11
POINT_DISTINCT_TOL = 1e-9


@dataclass
class PeriodicOrbit:
    theta: float
    period: int
    itinerary: tuple
    points: np.ndarray
    birkhoff_omega: float
    birkhoff_psi: float
    residual: float


def _necklaces(d, p):
    """One representative word per cyclic equivalence class (lexicographic minimum)."""
    out = []
    for w in product(range(d), repeat=p):
        if all(w <= w[i:] + w[:i] for i in range(1, p)):
            out.append(w)
    return out


def _orbit_from_word(sys, theta, word, max_iter=200):
    """Fixed point of the composed inverse branches phi_{w0} o ... o phi_{w_{p-1}}."""
    p = len(word)
    x = 0.5
    for _ in range(max_iter):
        y = x
        for b in reversed(word):
            y = float(sys.fibre_inverse_branch(b, y, theta))
        moved = abs(((y - x + 0.5) % 1.0) - 0.5)
        x = y
        if moved < 1e-15:
            break
    pts = np.empty(p)
    pts[-1] = sys.fibre_inverse_branch(word[-1], x, theta)
    for k in range(p - 2, -1, -1):
        pts[k] = sys.fibre_inverse_branch(word[k], pts[k + 1], theta)
    return pts


def _fibre_iterate(sys, x, theta, n):
    for _ in range(n):
        x = wrap(sys.fibre_degree * x + sys.f_pert(x, theta))
    return x


def _min_period(pts):
    p = len(pts)
    for q in range(1, p):
        if p % q == 0:
            shifted = np.roll(pts, -q)
            if np.max(np.abs(((pts - shifted + 0.5) % 1.0) - 0.5)) < POINT_DISTINCT_TOL:
                return q
    return p


def periodic_orbits(sys, theta, period, psi_tol=1e-10, include_repeats=False):
    """All periodic orbits of the fibre map f_theta with the given (minimal) period.

    One orbit per cyclic-equivalence class of branch itineraries, found by
    iterating the composed inverse branches (a lam^-p contraction); orbits
    that are lower-period repeats or duplicate point sets (boundary words)
    are dropped unless include_repeats is set.
    """
    if period > 8:
        raise ValueError("period <= 8 required (d^p enumeration)")
    theta = float(theta)
    found = []
    seen = []
    for word in _necklaces(sys.fibre_degree, period):
        pts = _orbit_from_word(sys, theta, word)
        residual = float(np.abs(
            ((_fibre_iterate(sys, pts[0], theta, period) - pts[0] + 0.5) % 1.0) - 0.5
        ))
        if residual > ORBIT_RESIDUAL_TOL:
            continue
        is_repeat = _min_period(pts) < period
        key = np.sort(pts)
        dup = any(
            len(k) == len(key) and np.max(np.abs(((k - key + 0.5) % 1) - 0.5)) < POINT_DISTINCT_TOL
            for k in seen
        )
        if dup or (is_repeat and not include_repeats):
            continue
        seen.append(key)
        w_avg = float(np.mean(sys.omega(pts, theta)))
        wt = sys.omega.deriv_eval(pts, theta, 0, 1)
        wx = sys.omega.deriv_eval(pts, theta, 1, 0)
        s_star = slope_s_star0(sys, pts, theta, tol=psi_tol)
        psi_avg = float(np.mean(wt + wx * s_star))
        found.append(
            PeriodicOrbit(
                theta=theta, period=period, itinerary=word, points=pts,
                birkhoff_omega=w_avg, birkhoff_psi=psi_avg, residual=residual,
            )
        )
    return found


def a0_span_margin(sys, theta, max_period, psi_tol=1e-10):
    """Second singular value of the Birkhoff-average difference matrix.

    Margin 0 means the periodic-orbit sufficient condition fails at this
    theta (e.g. for skew products, where all averages coincide); a positive
    margin certifies that the collected differences span the plane.
    """
    if max_period > 6:
        raise ValueError("max_period <= 6 required")
    orbits = []
    for p in range(1, max_period + 1):
        orbits.extend(periodic_orbits(sys, theta, p, psi_tol=psi_tol))
    if len(orbits) < 3:
        return 0.0, orbits
    base = np.array([orbits[0].birkhoff_omega, orbits[0].birkhoff_psi])
    diffs = np.array(
        [[o.birkhoff_omega, o.birkhoff_psi] for o in orbits[1:]]
    ) - base
    svals = np.linalg.svd(diffs, compute_uv=False)
    margin = float(svals[1]) if len(svals) > 1 else 0.0
    return margin, orbits
