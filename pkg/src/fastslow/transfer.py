"""Invariant fibre densities and fibre averages.

The fibre map x -> f(x, theta) is uniformly expanding, so its transfer
operator

    (L_theta rho)(x) = sum_branches rho(y_b(x)) / f'(y_b(x))

has a unique fixed probability density rho_theta.  We collocate L_theta on a
uniform grid with trigonometric interpolation (spectrally accurate for the
smooth densities of trig-polynomial systems) and power-iterate from the
constant density; the oscillation contracts geometrically for lam > 3.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import NoConvergence, NotExpanding
from .slopes import build_psi_field, slope_s_star0

MAX_POWER_ITER = 10_000


def trig_interp_kernel(t, N):
    """Periodic band-limited interpolation kernel for an even-N uniform grid."""
    t = (np.asarray(t, dtype=float) + 0.5) % 1.0 - 0.5
    out = np.ones_like(t)
    small = np.abs(t) < 1e-14
    ts = np.where(small, 0.5, t)
    out = np.where(small, 1.0, np.sin(N * np.pi * ts) / (N * np.tan(np.pi * ts)))
    return out


@dataclass
class CircleDensity:
    """Invariant density of one fibre map on a uniform grid.

    values[j] approximates rho_theta(j/N); the trapezoid rule on the uniform
    periodic grid (i.e. the plain mean) integrates it to 1.
    """

    theta: float
    N: int
    values: np.ndarray
    residual: float
    iterations: int

    def grid(self):
        return np.arange(self.N) / self.N

    def __call__(self, x):
        """Trigonometric interpolation of the grid values at arbitrary points."""
        x = np.asarray(x, dtype=float)
        K = trig_interp_kernel(x[..., None] - self.grid(), self.N)
        return K @ self.values

    def integrate(self, h):
        """Fibre average of h (callable on [0,1) or grid-value array)."""
        hv = h(self.grid()) if callable(h) else np.asarray(h, dtype=float)
        return float(np.mean(hv * self.values))


def transfer_matrix(sys, theta, N):
    """Dense collocation matrix of L_theta on the uniform N-grid."""
    d = sys.fibre_degree
    x = np.arange(N) / N
    y = np.empty((d, N))
    w = np.empty((d, N))
    for b in range(d):
        y[b] = sys.fibre_inverse_branch(b, x, theta)
        w[b] = 1.0 / (d + sys.f_pert.deriv_eval(y[b], theta, 1, 0))
    # (L rho)(x_j) = sum_b w[b,j] * rho(y[b,j]); interpolate rho from grid values
    K = trig_interp_kernel(y[..., None] - x, N)  # (d, N, N)
    return np.einsum("bj,bjm->jm", w, K)


def invariant_density(sys, theta, N=256, tol=1e-12):
    """Power-iterate the collocated transfer operator to its fixed density.

    Parameters follow the defaults N = 256, tol = 1e-12; the iteration stops
    when successive sup-distance is below tol, and the final residual
    ||L rho - rho||_inf is recorded.
    """
    if N < 64:
        raise ValueError("N >= 64 required")
    if tol < 1e-13:
        raise ValueError("tol >= 1e-13 required")
    if sys.lam <= 1.0:
        raise NotExpanding("fibre maps not certified expanding")
    L = transfer_matrix(sys, theta, N)
    rho = np.ones(N)
    for it in range(1, MAX_POWER_ITER + 1):
        new = L @ rho
        new /= np.mean(new)
        delta = float(np.max(np.abs(new - rho)))
        rho = new
        if delta < tol:
            break
    else:
        raise NoConvergence("transfer-operator power iteration did not converge")
    if float(rho.min()) < -1e-12:
        raise NoConvergence("invariant density has a non-trivial negative part")
    rho = np.clip(rho, 0.0, None)
    rho /= np.mean(rho)
    residual = float(np.max(np.abs(L @ rho - rho)))
    return CircleDensity(theta=float(theta), N=N, values=rho, residual=residual, iterations=it)


def fibre_average(rho, h):
    """Trapezoid (= mean) quadrature of h against a CircleDensity."""
    return rho.integrate(h)


@dataclass
class AveragedDrift:
    """Tabulated omega_bar, psi_bar (regularized) and psi_bar_star over theta.

    Values are periodic; cubic spline interpolants are exposed as callables
    taking angles mod 1.
    """

    theta_grid: np.ndarray
    omega_bar: np.ndarray
    psi_bar: np.ndarray
    psi_bar_star: np.ndarray
    residuals: np.ndarray
    psi_n0: int
    _splines: dict = field(default_factory=dict, repr=False)

    def _spline(self, name):
        if name not in self._splines:
            th = np.append(self.theta_grid, 1.0)
            vals = np.append(getattr(self, name), getattr(self, name)[0])
            self._splines[name] = CubicSpline(th, vals, bc_type="periodic")
        return self._splines[name]

    def omega_bar_at(self, theta):
        return self._spline("omega_bar")(np.asarray(theta) % 1.0)

    def omega_bar_prime(self, theta):
        return self._spline("omega_bar")(np.asarray(theta) % 1.0, 1)

    def psi_bar_at(self, theta):
        return self._spline("psi_bar")(np.asarray(theta) % 1.0)

    def psi_bar_star_at(self, theta):
        return self._spline("psi_bar_star")(np.asarray(theta) % 1.0)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("theta,omega_bar,psi_bar,psi_bar_star,residual\n")
            for row in zip(
                self.theta_grid, self.omega_bar, self.psi_bar,
                self.psi_bar_star, self.residuals,
            ):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def averaged_drift(sys, N_theta=256, N=256, tol=1e-12, psi_field=None, workers=1):
    """Tabulate omega_bar, psi_bar and psi_bar_star on a uniform theta grid."""
    if psi_field is None:
        psi_field = build_psi_field(sys)
    thetas = np.arange(N_theta) / N_theta
    x = np.arange(N) / N

    def one(i):
        th = thetas[i]
        rho = invariant_density(sys, th, N=N, tol=tol)
        w_vals = sys.omega(x, th)
        wt = sys.omega.deriv_eval(x, th, 0, 1)
        wx = sys.omega.deriv_eval(x, th, 1, 0)
        psi_vals = psi_field(x, th)
        psis_vals = wt + wx * slope_s_star0(sys, x, th, tol=1e-12)
        return (
            rho.integrate(w_vals),
            rho.integrate(psi_vals),
            rho.integrate(psis_vals),
            rho.residual,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(one, range(N_theta)))
    else:
        rows = [one(i) for i in range(N_theta)]
    ob, pb, pbs, res = (np.array(col) for col in zip(*rows))
    return AveragedDrift(
        theta_grid=thetas, omega_bar=ob, psi_bar=pb, psi_bar_star=pbs,
        residuals=res, psi_n0=psi_field.n0,
    )
