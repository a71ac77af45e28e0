"""Independent reference computations used by the test suite.

These deliberately avoid the library's own algorithms: finite differences
for jets, extended-precision (50-digit) matrix products for inverse-
Jacobian quantities, dense grid scans for roots and preimages, and brute
Monte-Carlo / quadrature for measures.
"""

import mpmath as mp
import numpy as np


def fd_partial(fn, x, t, dx, dt, h=1e-5):
    """Central finite difference of a callable fn(x, t) (orders <= 2 per axis)."""
    if dx == 0 and dt == 0:
        return fn(x, t)
    if dx > 0:
        return (fd_partial(fn, x + h, t, dx - 1, dt, h)
                - fd_partial(fn, x - h, t, dx - 1, dt, h)) / (2 * h)
    return (fd_partial(fn, x, t + h, dx, dt - 1, h)
            - fd_partial(fn, x, t - h, dx, dt - 1, h)) / (2 * h)


def mp_jacobian_chain(sys, xs, ts, dps=60):
    """50+-digit product of one-step Jacobians along stored orbit points.

    Returns the four entries of dF^n as mpmath numbers; the orbit points
    are taken as given (the claim under test is the algebra along them).
    """
    mp.mp.dps = dps
    J = mp.eye(2)
    eps = mp.mpf(repr(sys.epsilon))
    n = len(xs) - 1
    for k in range(n):
        x, t = float(xs[k]), float(ts[k])
        fx = mp.mpf(sys.fibre_degree) + mp.mpf(repr(float(sys.f_pert.deriv_eval(x, t, 1, 0))))
        ft = mp.mpf(repr(float(sys.f_pert.deriv_eval(x, t, 0, 1))))
        wx = mp.mpf(repr(float(sys.omega.deriv_eval(x, t, 1, 0))))
        wt = mp.mpf(repr(float(sys.omega.deriv_eval(x, t, 0, 1))))
        Jk = mp.matrix([[fx, ft], [eps * wx, 1 + eps * wt]])
        J = Jk * J
    return J


def mp_inverse_applied_to_e2(sys, xs, ts, dps=60):
    """[dF^n]^{-1}(0,1) via extended precision: (s*Upsilon, Upsilon)."""
    J = mp_jacobian_chain(sys, xs, ts, dps=dps)
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return float(-J[0, 1] / det), float(J[0, 0] / det)


def mp_orbit(sys, x0, t0, n, dps=40):
    """Extended-precision reference orbit (values reduced mod 1 as floats)."""
    mp.mp.dps = dps
    x, t = mp.mpf(repr(float(x0))), mp.mpf(repr(float(t0)))
    eps = mp.mpf(repr(sys.epsilon))
    d = sys.fibre_degree
    two_pi = 2 * mp.pi

    def poly(p, xx, tt):
        acc = mp.mpf(0)
        for (k, l), (ac, a_s) in sorted(p.terms.items()):
            ph = two_pi * (k * xx + l * tt)
            acc += mp.mpf(repr(ac)) * mp.cos(ph) + mp.mpf(repr(a_s)) * mp.sin(ph)
        return acc

    out = [(float(x), float(t))]
    for _ in range(n):
        xn = (d * x + poly(sys.f_pert, x, t)) % 1
        tn = (t + eps * poly(sys.omega, x, t)) % 1
        x, t = xn, tn
        out.append((float(x), float(t)))
    return np.array(out)


def grid_roots_fixed_points(sys, theta, period, n_grid=2_000_000):
    """Fixed points of the fibre map iterate by dense sign-change bracketing."""
    x = np.arange(n_grid) / n_grid
    y = x.copy()
    for _ in range(period):
        y = (sys.fibre_degree * y + sys.f_pert(y, theta)) % 1.0
    g = ((y - x + 0.5) % 1.0) - 0.5
    s = np.sign(g)
    idx = np.nonzero((s[:-1] * s[1:] < 0) & (np.abs(g[:-1]) < 0.25))[0]
    roots = []
    for i in idx:
        a, b = x[i], x[i + 1]
        ga, gb = g[i], g[i + 1]
        roots.append(a - ga * (b - a) / (gb - ga))
    return np.array(roots)


def grid_preimages(sys, x_target, theta, n_grid=1_000_000):
    """All preimages of x_target under the fibre map, by bracketing f - target."""
    y = np.linspace(0.0, 1.0, n_grid + 1)
    g = sys.fibre_degree * y + sys.f_pert(y, theta)
    roots = []
    for m in range(int(np.floor(g[0] - x_target)) , int(np.ceil(g[-1] - x_target)) + 1):
        h = g - (x_target + m)
        idx = np.nonzero(h[:-1] * h[1:] < 0)[0]
        for i in idx:
            a, b = y[i], y[i + 1]
            roots.append(a - h[i] * (b - a) / (h[i + 1] - h[i]))
    return np.sort(np.array(roots) % 1.0)


def fibre_orbit_histogram(sys, theta, n_total=10_000_000, bins=1024, n_parallel=10_000,
                          burn=200, seed=0):
    """Occupation histogram of long fibre orbits (invariant-density oracle)."""
    rng = np.random.default_rng(seed)
    x = rng.random(n_parallel)
    for _ in range(burn):
        x = (sys.fibre_degree * x + sys.f_pert(x, theta)) % 1.0
    steps = int(np.ceil(n_total / n_parallel))
    counts = np.zeros(bins)
    for _ in range(steps):
        counts += np.bincount((x * bins).astype(int) % bins, minlength=bins)
        x = (sys.fibre_degree * x + sys.f_pert(x, theta)) % 1.0
    return counts / counts.sum() * bins  # normalized to a density
