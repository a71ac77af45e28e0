"""Monte-Carlo estimation: physical measure, Lyapunov exponents, decay rates.

All estimators evolve vectorized ensembles with generators derived from a
master seed by labelled counter splitting, so results are reproducible and
adding an experiment never perturbs another's stream.  Reductions use
numpy's pairwise summation (order independent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFit
from .reporting import stream, wilson_interval
from .slopes import sigma_hat, upsilon_along_orbit
from .system import circle_dist, wrap


@dataclass
class Histogram2D:
    """Occupation histogram on the torus, normalized to a probability density."""

    edges_x: np.ndarray
    edges_t: np.ndarray
    counts: np.ndarray
    total: int

    @property
    def density(self):
        bins = self.counts.shape
        return self.counts / self.total * (bins[0] * bins[1])

    def theta_marginal(self):
        p = self.counts.sum(axis=0) / self.total
        centres = 0.5 * (self.edges_t[:-1] + self.edges_t[1:])
        return centres, p


def _evolve(sys, x, t, n):
    for _ in range(n):
        x, t = sys.step(x, t)
    return x, t


def physical_measure(sys, n_orbits=100_000, burn_in=None, n_steps=10, bins=(128, 128),
                     seed=0, V=2.0, T0=1.0):
    """Occupation histogram of Lebesgue-seeded orbits after burn-in.

    The default burn-in is V*log(1/eps)*N0 steps (N0 = T0/eps), after which
    the slow variable has localized at the sink for mostly expanding or
    contracting systems.
    """
    rng = stream(seed, "physical-measure")
    if burn_in is None:
        burn_in = int(V * math.log(1.0 / sys.epsilon) * math.floor(T0 / sys.epsilon))
    x = rng.random(n_orbits)
    t = rng.random(n_orbits)
    x, t = _evolve(sys, x, t, burn_in)
    counts = np.zeros(bins)
    for _ in range(n_steps):
        H, _, _ = np.histogram2d(x, t, bins=bins, range=[[0, 1], [0, 1]])
        counts += H
        x, t = sys.step(x, t)
    return Histogram2D(
        edges_x=np.linspace(0, 1, bins[0] + 1), edges_t=np.linspace(0, 1, bins[1] + 1),
        counts=counts, total=n_orbits * n_steps,
    )


@dataclass
class LyapunovEstimate:
    value: float
    stderr: float
    predictor: float
    n_samples: int
    n_steps: int
    seed: int


def central_lyapunov(sys, n_samples=64, n_steps=100_000, seed=0, burn_in=None,
                     psi_bar_star_at_sink=None, V=2.0, T0=1.0):
    """Birkhoff average of log(upsilon) along stationary orbits.

    upsilon = 1 + eps*(dtheta omega + dx omega * s_eps_*) is evaluated with
    one sliding backward fold per orbit block.  The per-orbit means give the
    ensemble standard error; the first-order predictor eps*psi_bar_star at
    the sink is attached when supplied.
    """
    if sys.epsilon == 0.0:
        return LyapunovEstimate(0.0, 0.0, 0.0, n_samples, n_steps, seed)
    rng = stream(seed, "central-lyapunov")
    if burn_in is None:
        burn_in = int(V * math.log(1.0 / sys.epsilon) * math.floor(T0 / sys.epsilon))
    x = rng.random(n_samples)
    t = rng.random(n_samples)
    x, t = _evolve(sys, x, t, burn_in)
    block = 2048
    means = np.zeros(n_samples)
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        # tail beyond m is used only to close the backward fold
        xs, ts = sys.orbit(x, t, m + 60)
        ups, _ = upsilon_along_orbit(sys, xs, ts)
        means += np.sum(np.log(ups[:m]), axis=0)
        x, t = xs[m], ts[m]
        done += m
    means /= n_steps
    value = float(np.mean(means))
    stderr = float(np.std(means, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    pred = sys.epsilon * psi_bar_star_at_sink if psi_bar_star_at_sink is not None else float("nan")
    return LyapunovEstimate(value, stderr, pred, n_samples, n_steps, seed)


@dataclass
class DecayFit:
    lags: np.ndarray
    corr: np.ndarray
    stderr: np.ndarray
    rate: float
    amplitude: float
    r_squared: float
    window: tuple
    seed: int
    tables: dict = field(default_factory=dict)


def correlation_decay(sys, A, B, lag_max=2000, n_samples=1_000_000, seed=0,
                      nu_B=None, lag_stride=1, V=2.0, T0=1.0):
    """Exponential fit of C(n) = Leb(A * B o F^n) - Leb(A) nu_eps(B).

    Leb(A * B o F^n) is averaged over a Lebesgue-seeded cloud; nu_eps(B) is
    estimated with an independent stream using the physical-measure burn-in
    protocol.  The fit runs on the largest contiguous lag window where |C|
    exceeds 3 standard errors and log|C| stays within 0.5 of a line.
    """
    rng = stream(seed, "correlation-leb")
    x = rng.random(n_samples)
    t = rng.random(n_samples)
    A0 = A(x, t)
    leb_A = float(np.mean(A0))
    if nu_B is None:
        rng2 = stream(seed, "correlation-nu")
        burn = int(V * math.log(1.0 / sys.epsilon) * math.floor(T0 / sys.epsilon))
        xb = rng2.random(max(n_samples // 4, 10_000))
        tb = rng2.random(xb.size)
        xb, tb = _evolve(sys, xb, tb, burn)
        acc = 0.0
        for _ in range(16):
            acc += float(np.mean(B(xb, tb)))
            xb, tb = sys.step(xb, tb)
        nu_B = acc / 16.0
    lags = np.arange(0, lag_max + 1, lag_stride)
    corr = np.empty(lags.size)
    serr = np.empty(lags.size)
    k = 0
    for n in range(lag_max + 1):
        if n == lags[k]:
            prod = A0 * B(x, t)
            corr[k] = float(np.mean(prod)) - leb_A * nu_B
            serr[k] = float(np.std(prod) / math.sqrt(n_samples))
            k += 1
            if k == lags.size:
                break
        x, t = sys.step(x, t)
    rate, amp, r2, window = _fit_exponential(lags, corr, serr)
    return DecayFit(
        lags=lags, corr=corr, stderr=serr, rate=rate, amplitude=amp,
        r_squared=r2, window=window, seed=seed,
    )


def _fit_exponential(lags, corr, serr, sig_factor=3.0, lin_tol=0.5):
    sig = np.abs(corr) > sig_factor * serr
    # largest contiguous significant window (ignoring lag 0 transients is the
    # fit's own job via the linearity trim)
    best = (0, 0)
    i = 0
    while i < len(lags):
        if sig[i]:
            j = i
            while j + 1 < len(lags) and sig[j + 1]:
                j += 1
            if j - i > best[1] - best[0]:
                best = (i, j)
            i = j + 1
        else:
            i += 1
    i0, i1 = best
    if i1 - i0 < 4:
        raise DegenerateFit("no significant lag window for the correlation fit")
    ls = lags[i0 : i1 + 1].astype(float)
    ys = np.log(np.abs(corr[i0 : i1 + 1]))
    # trim to the portion within lin_tol of the straight line (greedy refit)
    for _ in range(8):
        Acol = np.vstack([ls, np.ones_like(ls)]).T
        coef, *_ = np.linalg.lstsq(Acol, ys, rcond=None)
        resid = ys - Acol @ coef
        keep = np.abs(resid) <= lin_tol
        if keep.all() or keep.sum() < 5:
            break
        ls, ys = ls[keep], ys[keep]
    slope, intercept = coef
    pred = slope * ls + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return -float(slope), math.exp(float(intercept)), r2, (float(ls[0]), float(ls[-1]))


def rate_scaling(systems, A, B, lag_max=2000, n_samples=400_000, seed=0):
    """Fitted decay rates across an epsilon grid and the log-log regression.

    Returns a dict with per-epsilon rates, the slope of log c_eps against
    log(eps/log(1/eps)), the implied C2 band, and the pure-eps regression
    for comparison (the conjectured optimal rate).
    """
    rows = []
    for i, sys in enumerate(systems):
        fit = correlation_decay(sys, A, B, lag_max=lag_max, n_samples=n_samples,
                                seed=seed + i)
        rows.append((sys.epsilon, fit.rate, fit.r_squared, fit))
    eps = np.array([r[0] for r in rows])
    rates = np.array([r[1] for r in rows])
    xs = np.log(eps / np.log(1.0 / eps))
    Acol = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(Acol, np.log(rates), rcond=None)
    xs2 = np.log(eps)
    coef2, *_ = np.linalg.lstsq(np.vstack([xs2, np.ones_like(xs2)]).T, np.log(rates), rcond=None)
    c2_band = rates / (eps / np.log(1.0 / eps))
    return {
        "epsilon": eps,
        "rate": rates,
        "r_squared": np.array([r[2] for r in rows]),
        "slope_eps_over_log": float(coef[0]),
        "slope_pure_eps": float(coef2[0]),
        "C2_band": (float(c2_band.min()), float(c2_band.max())),
        "fits": [r[3] for r in rows],
    }


@dataclass
class SinkLocalization:
    mass: float
    wilson_low: float
    wilson_high: float
    C: float
    radius: float
    horizon: int
    seed: int


def sink_localization(sys, theta_minus, C=None, n_samples=200_000, seed=0,
                      V=2.0, T0=1.0, mass_target=0.5):
    """Empirical mass of B(theta_minus, C*sqrt(eps)) after the localization horizon.

    When C is not given it is calibrated as the smallest value achieving the
    target mass (to be held fixed across other epsilon values).
    """
    eps = sys.epsilon
    horizon = int(math.ceil(V * math.log(1.0 / eps)) * math.floor(T0 / eps))
    rng = stream(seed, "sink-localization")
    x = rng.random(n_samples)
    t = rng.random(n_samples)
    x, t = _evolve(sys, x, t, horizon)
    d = circle_dist(t, theta_minus)
    if C is None:
        C = float(np.quantile(d, mass_target) / math.sqrt(eps))
    radius = C * math.sqrt(eps)
    k = int(np.count_nonzero(d <= radius))
    lo, hi = wilson_interval(k, n_samples)
    return SinkLocalization(
        mass=k / n_samples, wilson_low=lo, wilson_high=hi, C=float(C),
        radius=radius, horizon=horizon, seed=seed,
    )


def theta_marginal_std(sys, theta_minus, n_samples=200_000, seed=0, V=2.0, T0=1.0):
    """Standard deviation of the slow coordinate around the sink (circle lift)."""
    eps = sys.epsilon
    horizon = int(math.ceil(V * math.log(1.0 / eps)) * math.floor(T0 / eps))
    rng = stream(seed, "theta-marginal")
    x = rng.random(n_samples)
    t = rng.random(n_samples)
    x, t = _evolve(sys, x, t, horizon)
    dev = ((t - theta_minus + 0.5) % 1.0) - 0.5
    return float(np.std(dev))


def tv_distance(x1, t1, x2, t2, bins=64):
    H1, _, _ = np.histogram2d(x1, t1, bins=bins, range=[[0, 1], [0, 1]])
    H2, _, _ = np.histogram2d(x2, t2, bins=bins, range=[[0, 1], [0, 1]])
    return 0.5 * float(np.abs(H1 / H1.sum() - H2 / H2.sum()).sum())


def tv_contraction(sys, family1, family2, horizon, checkpoints, bins=64,
                   n_points=1_000_000, seed=0):
    """Total-variation history between two pushed family-sampled clouds.

    Both families are sampled to point clouds (same seed stream structure),
    evolved together, and binned at the checkpoints; the exponential
    envelope is fitted in units of eps^-1 * log(1/eps) steps.
    """
    x1, t1 = family1.sample(n_points, seed=seed)
    x2, t2 = family2.sample(n_points, seed=seed + 1)
    eps = sys.epsilon
    unit = (1.0 / eps) * math.log(1.0 / eps)
    rows = []
    step = 0
    for cp in sorted(checkpoints):
        x1, t1 = _evolve(sys, x1, t1, cp - step)
        x2, t2 = _evolve(sys, x2, t2, cp - step)
        step = cp
        rows.append((cp, cp / unit, tv_distance(x1, t1, x2, t2, bins=bins)))
    arr = np.array(rows)
    tvs = arr[:, 2]
    pos = tvs > 0
    if pos.sum() >= 2:
        coef, *_ = np.linalg.lstsq(
            np.vstack([arr[pos, 1], np.ones(pos.sum())]).T, np.log(tvs[pos]), rcond=None
        )
        envelope_rate = -float(coef[0])
    else:
        envelope_rate = float("inf")
    return {"steps": arr[:, 0], "time_units": arr[:, 1], "tv": tvs,
            "envelope_rate_per_unit": envelope_rate, "seed": seed}


def scan_mostly_expanding(make_system, grid, N_theta=96, N=128, margin=1e-3):
    """psi_bar_star at the sink across a parameter grid, with failure diagnostics."""
    from .averaging import classify_drift
    from .errors import FastslowError
    from .transfer import averaged_drift

    rows = []
    for params in grid:
        try:
            sys = make_system(*params)
            drift = averaged_drift(sys, N_theta=N_theta, N=N)
            cls = classify_drift(drift, margin=margin)
            rows.append({
                "params": params, "ok": True, "kind": cls.kind,
                "psi_bar_star_at_sink": cls.psi_bar_star_at_sink,
                "theta_minus": cls.sink.theta_minus,
            })
        except FastslowError as exc:
            rows.append({"params": params, "ok": False, "kind": "invalid",
                         "error": f"{type(exc).__name__}: {exc}"})
    return rows
