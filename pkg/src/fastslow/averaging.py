"""Averaged dynamics: sinks/sources, classification, the slow path, probes.

The slow coordinate shadows dtheta/dt = omega_bar(theta) for times of order
1/eps.  Everything here works off an AveragedDrift tabulation; zero finding
and classification use its periodic cubic interpolants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import FastslowError, NotMostlyExpanding, NotOmega1
from .slopes import build_psi_field
from .system import FastSlowSystem, circle_dist, wrap
from .transfer import averaged_drift
from .reporting import wilson_interval

DEGENERATE_DERIV = 1e-8
MARGINAL_BAND = 1e-3


@dataclass(frozen=True)
class SinkSourceReport:
    theta_minus: float
    theta_plus: float
    deriv_minus: float
    deriv_plus: float
    zero_count: int


def find_zeros(drift):
    """Locate the zeros of omega_bar; requires exactly one sink/source pair.

    Grid sign changes are bracketed and polished on the cubic interpolant to
    1e-12.  NotOmega1 is raised when the zero count differs from two or a
    zero is degenerate (|omega_bar'| < 1e-8).
    """
    th = drift.theta_grid
    vals = drift.omega_bar
    n = len(th)
    f = lambda s: float(drift.omega_bar_at(s))
    zeros = []
    for i in range(n):
        a, b = th[i], th[(i + 1) % n] + (1.0 if i == n - 1 else 0.0)
        va, vb = vals[i], vals[(i + 1) % n]
        if va == 0.0:
            zeros.append(a)
        elif va * vb < 0.0:
            zeros.append(brentq(f, a, b, xtol=1e-14, rtol=8.9e-16))
    zeros = sorted({round(z % 1.0, 12) for z in zeros})
    if len(zeros) != 2:
        raise NotOmega1(f"omega_bar has {len(zeros)} zeros on the grid, expected 2")
    d = [float(drift.omega_bar_prime(z)) for z in zeros]
    if any(abs(dv) < DEGENERATE_DERIV for dv in d):
        raise NotOmega1("degenerate zero of omega_bar (|derivative| < 1e-8)")
    if d[0] * d[1] > 0:
        raise NotOmega1("zeros of omega_bar are not a sink/source pair")
    i_minus = 0 if d[0] < 0 else 1
    i_plus = 1 - i_minus
    return SinkSourceReport(
        theta_minus=zeros[i_minus], theta_plus=zeros[i_plus],
        deriv_minus=d[i_minus], deriv_plus=d[i_plus], zero_count=2,
    )


@dataclass(frozen=True)
class Classification:
    kind: str  # "MostlyExpanding" | "MostlyContracting" | "Marginal"
    psi_bar_star_at_sink: float
    sink: SinkSourceReport


def classify_drift(drift, margin=MARGINAL_BAND):
    report = find_zeros(drift)
    v = float(drift.psi_bar_star_at(report.theta_minus))
    if abs(v) < margin:
        kind = "Marginal"
    elif v > 0:
        kind = "MostlyExpanding"
    else:
        kind = "MostlyContracting"
    return Classification(kind=kind, psi_bar_star_at_sink=v, sink=report)


def classify_system(sys, N_theta=256, N=256, margin=MARGINAL_BAND, drift=None):
    """Evaluate psi_bar_star at the sink of the averaged drift and classify."""
    if drift is None:
        drift = averaged_drift(sys, N_theta=N_theta, N=N)
    return classify_drift(drift, margin=margin)


def normalize_system(sys, drift=None, N_theta=256, N=256):
    """Rescale omega and epsilon so that psi_bar_star(theta_minus) = 1.

    The product eps*omega (hence the map itself) is unchanged.  Returns
    (normalized_system, scale).  NotMostlyExpanding unless the sink value
    is positive and non-marginal.
    """
    cls = classify_system(sys, N_theta=N_theta, N=N, drift=drift)
    if cls.kind != "MostlyExpanding":
        raise NotMostlyExpanding(f"classification is {cls.kind}")
    c = cls.psi_bar_star_at_sink
    if abs(c - 1.0) < 1e-10:
        return sys, 1.0
    out = FastSlowSystem(
        sys.fibre_degree, sys.f_pert, sys.omega.scaled(1.0 / c), sys.epsilon * c,
        check_diffeo=False,
    )
    return out, c


def integrate_averaged(drift, theta0, T, dt=1e-3):
    """Classical RK4 for dtheta/dt = omega_bar(theta) (lifted, not wrapped).

    Returns (times, thetas) with thetas of shape (n_steps+1,) + shape(theta0).
    """
    if dt > 1e-3 + 1e-15:
        raise ValueError("dt <= 1e-3 required")
    n = max(1, int(math.ceil(T / dt - 1e-12)))
    h = T / n
    theta = np.array(theta0, dtype=float)
    out = np.empty((n + 1,) + theta.shape)
    out[0] = theta
    g = drift.omega_bar_at
    for k in range(n):
        k1 = g(theta)
        k2 = g(theta + 0.5 * h * k1)
        k3 = g(theta + 0.5 * h * k2)
        k4 = g(theta + h * k3)
        theta = theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = theta
    return np.linspace(0.0, T, n + 1), out


@dataclass
class SlowPath:
    """Piecewise-linear interpolations of the slow coordinate and of zeta.

    theta values are lifted (increments eps*omega are accumulated without
    wrapping) so that sup-deviation comparisons against the averaged flow
    are meaningful; knots reproduce the orbit values exactly.
    """

    epsilon: float
    times: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray

    def theta_at(self, t):
        return _interp_cols(t, self.times, self.theta)

    def zeta_at(self, t):
        return _interp_cols(t, self.times, self.zeta)


def _interp_cols(t, times, values):
    t = np.asarray(t, dtype=float)
    if values.ndim == 1:
        return np.interp(t, times, values)
    flat = values.reshape(values.shape[0], -1)
    cols = [np.interp(t, times, flat[:, j]) for j in range(flat.shape[1])]
    out = np.stack(cols, axis=-1)
    return out.reshape(t.shape + values.shape[1:])


def slow_path(sys, x0, theta0, T, psi_field=None):
    """Iterate F_eps for ceil(T/eps) steps recording lifted theta_k and zeta_k."""
    eps = sys.epsilon
    n = int(math.ceil(T / eps - 1e-12))
    if psi_field is None:
        psi_field = build_psi_field(sys)
    x = wrap(x0)
    t = wrap(theta0)
    t_lift = np.array(t, dtype=float)
    thetas = np.empty((n + 1,) + t_lift.shape)
    zetas = np.empty_like(thetas)
    thetas[0] = t_lift
    zetas[0] = 0.0
    for k in range(n):
        w = sys.omega(x, t)
        psi = psi_field(x, t)
        t_lift = t_lift + eps * w
        zetas[k + 1] = zetas[k] + eps * psi
        x, t = sys.step(x, t)
        thetas[k + 1] = t_lift
    return SlowPath(epsilon=eps, times=eps * np.arange(n + 1), theta=thetas, zeta=zetas)


def default_sink_window(drift, h_max=0.1, threshold=5.0 / 8.0, h_grid=200):
    """Largest h <= h_max with psi_bar > 5/8 on the window H_h around the sink.

    Requires a normalized (psi_bar_star(theta_minus) = 1) system in practice;
    raises FastslowError with a diagnostic when no h qualifies.
    """
    rep = find_zeros(drift)
    hs = h_max * (1.0 - np.arange(h_grid) / h_grid)
    for h in hs:
        probe = rep.theta_minus + np.linspace(-h, h, 101)
        if float(np.min(drift.psi_bar_at(probe))) > threshold:
            return float(h)
    raise FastslowError(
        "no window H_h with psi_bar > 5/8 exists; is the system normalized (A1)?"
    )


def default_capture_time(drift, h, cap=20.0):
    """Smallest multiple of 0.5 with averaged flow mapping H_h into H_{h/2}."""
    rep = find_zeros(drift)
    ends = np.array([rep.theta_minus - h, rep.theta_minus + h])
    T0 = 0.5
    while T0 <= cap:
        _, traj = integrate_averaged(drift, ends, T0, dt=1e-3)
        if np.all(np.abs(traj[-1] - rep.theta_minus) < h / 2.0):
            return T0
        T0 += 0.5
    raise FastslowError("averaged flow does not capture H_h within the T0 cap")


def averaged_zeta(drift, theta0, T, dt=1e-3):
    """Integral of psi_bar along the averaged flow (the eps -> 0 limit of zeta)."""
    times, traj = integrate_averaged(drift, theta0, T, dt=dt)
    vals = drift.psi_bar_at(traj)
    return float(np.trapezoid(vals, times)) if vals.ndim == 1 else np.trapezoid(
        vals, times, axis=0
    )


@dataclass(frozen=True)
class ProbeReport:
    success_probability: float
    wilson_low: float
    wilson_high: float
    n_samples: int
    T0: float
    h: float
    seed: int


def large_deviation_probe(sys, pair, drift, T0=None, h=None, n_samples=10_000, seed=0,
                          psi_field=None):
    """Empirical version of the sink large-deviation event.

    Samples initial points from a standard pair supported in T x H_h,
    iterates N_0 = floor(T0/eps) steps and reports the fraction with
    theta_{N0} in H_{3h/4} and zeta_{N0} >= 9*T0/16, with a Wilson 95%
    interval.
    """
    rep = find_zeros(drift)
    if h is None:
        h = default_sink_window(drift)
    if T0 is None:
        T0 = default_capture_time(drift, h)
    if psi_field is None:
        psi_field = build_psi_field(sys)
    n_samples = int(n_samples)
    xs, ths = pair.sample(n_samples, seed=seed)
    n0 = int(math.floor(T0 / sys.epsilon))
    x, t = wrap(xs), wrap(ths)
    zeta = np.zeros(n_samples)
    for _ in range(n0):
        zeta += sys.epsilon * psi_field(x, t)
        x, t = sys.step(x, t)
    ok = (circle_dist(t, rep.theta_minus) < 0.75 * h) & (zeta >= 9.0 * T0 / 16.0)
    k = int(np.count_nonzero(ok))
    lo, hi = wilson_interval(k, n_samples)
    return ProbeReport(
        success_probability=k / n_samples, wilson_low=lo, wilson_high=hi,
        n_samples=n_samples, T0=float(T0), h=float(h), seed=seed,
    )
