"""Centre curves, standard rectangles, foliations, patches and their dynamics.

A standard rectangle is an O(eps)-thick tube around a standard curve,
bounded below/above by (pre)standard curves and left/right by local centre
manifolds.  We represent a foliated rectangle by a chart

    (x, eta) in [A, B] x [0, 1]  ->  (x, theta(x, eta)),

where theta is a 2D Chebyshev tensor whose eta-level rows are the foliation
leaves (33 levels), together with side curves xl(eta), xr(eta) marking the
true (slanted) extent of each leaf between the bounding centre manifolds.
Densities are stored as chart functions rho_hat(x, eta) = rho(x, theta(x,eta));
ambient derivatives (for the scaled-chart roughness gauges) are obtained by
transforming chart derivatives through the foliation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from . import chebtools as ct
from .errors import (
    ChartInfeasible,
    HeightOutOfRange,
    KappaTooLarge,
    LeafValidationFailed,
    ZTooSmall,
)
from .pairs import PairFamily, StandardCurve, StandardDensity, StandardPair, _graph_maps
from .reporting import stream
from .slopes import s_star_along_orbit, sigma_hat, slope_s_star
from .system import wrap

M_NODES = 33  # leaf levels and per-leaf Chebyshev nodes


# -- centre curves ---------------------------------------------------------------


@dataclass
class CentreCurve:
    """Graph x(theta) of a local centre manifold over a lifted theta-interval."""

    theta0: float
    theta1: float
    thetas: np.ndarray
    xs: np.ndarray

    @property
    def height(self):
        return self.theta1 - self.theta0

    def x_at(self, theta):
        return np.interp(np.asarray(theta, dtype=float), self.thetas, self.xs)

    def max_slope(self):
        d = np.diff(self.xs) / np.diff(self.thetas)
        return float(np.max(np.abs(d))) if d.size else 0.0


def _slope_field(sys, tol=1e-9):
    """Batched evaluator of the invariant centre slope s_eps_* at fixed order."""
    sig = sigma_hat(sys)
    ft = sys.f_pert.sup_bound(0, 1)
    if ft == 0.0:
        return lambda x, t: np.zeros_like(np.asarray(x, dtype=float))
    first = ft / sys.lam
    n = max(2, int(math.ceil(math.log(tol * (1.0 - sig) / first) / math.log(sig))) + 1)

    def s_eval(x, t):
        xs, ts = sys.orbit(wrap(x), wrap(t), n)
        s = np.zeros_like(xs[0])
        eps = sys.epsilon
        for k in range(n - 1, -1, -1):
            xk, tk = xs[k], ts[k]
            fx = sys.fibre_degree + sys.f_pert.deriv_eval(xk, tk, 1, 0)
            ftv = sys.f_pert.deriv_eval(xk, tk, 0, 1)
            wx = sys.omega.deriv_eval(xk, tk, 1, 0)
            wt = sys.omega.deriv_eval(xk, tk, 0, 1)
            s = ((1.0 + eps * wt) * s - ftv) / (fx - eps * wx * s)
        return s

    return s_eval


def integrate_centre_curves(sys, x0, theta0, span, n_steps=None, s_eval=None):
    """Batched RK4 for dx/dtheta = s_eps_*(x, theta) over a common span.

    x0, theta0 are arrays of starting points (lift coordinates); span may be
    negative.  Returns arrays (n_steps+1, len(x0)) of (thetas, xs).
    """
    if abs(span) > 0.5:
        raise ChartInfeasible("centre curve span must be below 1/2")
    if s_eval is None:
        s_eval = _slope_field(sys)
    if n_steps is None:
        # nominal resolution eps/20, capped: the integrand is eps-Lipschitz
        # in theta so 64 RK4 steps are already far below the gauge tolerances
        n_steps = int(min(64, max(16, math.ceil(abs(span) / (sys.epsilon / 20.0)))))
    x = np.array(x0, dtype=float)
    t = np.array(theta0, dtype=float)
    h = span / n_steps
    xs = np.empty((n_steps + 1,) + x.shape)
    ts = np.empty_like(xs)
    xs[0], ts[0] = x, t
    for k in range(n_steps):
        k1 = s_eval(x, t)
        k2 = s_eval(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = s_eval(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = s_eval(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        xs[k + 1], ts[k + 1] = x, t
    return ts, xs


def integrate_centre_curve(sys, x0, theta0, theta_span, s_eval=None):
    """Single centre curve through (x0, theta0), spanning theta_span upward."""
    ts, xs = integrate_centre_curves(
        sys, np.array([x0]), np.array([theta0]), theta_span, s_eval=s_eval
    )
    lo, hi = (0, -1) if theta_span >= 0 else (-1, 0)
    return CentreCurve(
        theta0=float(ts[lo, 0]), theta1=float(ts[hi, 0]),
        thetas=ts[:, 0][:: 1 if theta_span >= 0 else -1].copy(),
        xs=xs[:, 0][:: 1 if theta_span >= 0 else -1].copy(),
    )


# -- charts ------------------------------------------------------------------------


def _eta_nodes():
    return ct.nodes(M_NODES, 0.0, 1.0)


@dataclass
class PatchChart:
    """Foliated-rectangle chart: leaf rows over a common x-window.

    theta_coef is a 2D Chebyshev coefficient tensor for theta(x, eta) on
    [A, B] x [0, 1]; xl_coef / xr_coef are eta-series for the slanted side
    boundaries (graphs of the bounding centre manifolds).
    """

    A: float
    B: float
    theta_coef: np.ndarray
    xl_coef: np.ndarray
    xr_coef: np.ndarray

    def _sc_x(self, x):
        return (2.0 * np.asarray(x, dtype=float) - (self.A + self.B)) / (self.B - self.A)

    @staticmethod
    def _sc_eta(eta):
        return 2.0 * np.asarray(eta, dtype=float) - 1.0

    def _pair(self, x, eta):
        xs = self._sc_x(x)
        es = self._sc_eta(eta)
        xs, es = np.broadcast_arrays(xs, es)
        return xs, es

    def theta(self, x, eta):
        return C.chebval2d(*self._pair(x, eta), self.theta_coef.T)

    def dtheta_deta(self, x, eta):
        cT = C.chebder(self.theta_coef, axis=0) * 2.0
        return C.chebval2d(*self._pair(x, eta), cT.T)

    def dtheta_dx(self, x, eta):
        cT = C.chebder(self.theta_coef.T, axis=0) * (2.0 / (self.B - self.A))
        return C.chebval2d(*self._pair(x, eta), cT.T.T)

    def xl(self, eta):
        return C.chebval(self._sc_eta(eta), self.xl_coef)

    def xr(self, eta):
        return C.chebval(self._sc_eta(eta), self.xr_coef)

    def leaf_fun(self, eta_star, m=M_NODES):
        """Leaf curve at level eta_star as a ChebFun over its true span."""
        a, b = float(self.xl(eta_star)), float(self.xr(eta_star))
        xs = ct.nodes(m, a, b)
        return ct.ChebFun.from_values(self.theta(xs, eta_star), a, b)

    def grids(self, m=M_NODES):
        """Node grids over the slanted domain: x[i, k] on leaf i, plus eta nodes."""
        etas = _eta_nodes()
        xl = self.xl(etas)
        xr = self.xr(etas)
        xg = 0.5 * (xl + xr)[:, None] + 0.5 * (xr - xl)[:, None] * ct._nodes_unit(m)
        return etas, xg

    def corner_window(self):
        etas = _eta_nodes()
        return float(np.min(self.xl(etas))), float(np.max(self.xr(etas)))


def chart_from_leaf_values(A, B, theta_vals, xl_vals, xr_vals):
    """Assemble a chart from leaf samples theta_vals[i, k] at the tensor nodes."""
    return PatchChart(
        A=float(A), B=float(B),
        theta_coef=ct.fit2d(theta_vals),
        xl_coef=ct.fit(xl_vals, 0.0, 1.0),
        xr_coef=ct.fit(xr_vals, 0.0, 1.0),
    )


def ambient_derivs(chart, U_coef):
    """Ambient gradient/Hessian grids of a chart function u(x, eta) on the slant grid.

    Returns dict with first derivatives (vx, vt) and second derivatives
    (vxx, vxt, vtt) of v(x, theta) = u(x, eta(x, theta)), sampled on the
    slanted node grid.  Everything is exact calculus on the two coefficient
    tensors: with r = theta_x/theta_eta, the ambient derivative operators
    in chart coordinates are d/dx|theta = d/dx - r d/deta and
    d/dtheta = (1/theta_eta) d/deta.
    """
    etas, xg = chart.grids()
    E = np.broadcast_to(etas[:, None], xg.shape)

    def ceval(coefs):
        return C.chebval2d(chart._sc_x(xg), chart._sc_eta(E), coefs.T)

    def dx(coefs):
        return (C.chebder(coefs.T, axis=0) * (2.0 / (chart.B - chart.A))).T

    def de(coefs):
        return C.chebder(coefs, axis=0) * 2.0

    T = chart.theta_coef
    th_x, th_e = ceval(dx(T)), ceval(de(T))
    th_xx, th_xe, th_ee = ceval(dx(dx(T))), ceval(de(dx(T))), ceval(de(de(T)))
    u_x, u_e = ceval(dx(U_coef)), ceval(de(U_coef))
    u_xx, u_xe, u_ee = (
        ceval(dx(dx(U_coef))), ceval(de(dx(U_coef))), ceval(de(de(U_coef)))
    )
    r = th_x / th_e
    r_x = (th_xx * th_e - th_x * th_xe) / th_e**2
    r_e = (th_xe * th_e - th_x * th_ee) / th_e**2

    vx = u_x - u_e * r
    vt = u_e / th_e
    # (vx)_x, (vx)_e as chart functions, then transform again
    vx_x = u_xx - u_xe * r - u_e * r_x
    vx_e = u_xe - u_ee * r - u_e * r_e
    vxx = vx_x - vx_e * r
    vxt = vx_e / th_e
    vt_e = (u_ee * th_e - u_e * th_ee) / th_e**2
    vtt = vt_e / th_e
    return {"vx": vx, "vt": vt, "vxx": vxx, "vxt": vxt, "vtt": vtt,
            "etas": etas, "xg": xg}


# -- foliated rectangles -------------------------------------------------------------


@dataclass
class Foliation:
    chart: PatchChart
    dlog_deta_bound: float
    Hlog_deta_bound: float


@dataclass
class FoliatedRectangle:
    chart: PatchChart
    z: float
    Z: float
    adapted_m: int = 0

    def leaf_curve(self, eta_star, z=None):
        return StandardCurve(self.chart.leaf_fun(eta_star), z=z or self.z)


@dataclass
class PatchGauges:
    Z: float
    R: float
    M: float
    L: float


@dataclass
class StandardPatch:
    """Foliated rectangle + chart density; induces a probability measure on T^2."""

    rect: FoliatedRectangle
    rho_coef: np.ndarray  # chart-function tensor for rho(x, theta(x,eta))
    R: float
    ledger: object = field(repr=False, default=None)

    # -- evaluation ----------------------------------------------------------

    def rho_hat(self, x, eta):
        ch = self.rect.chart
        return C.chebval2d(ch._sc_x(x), ch._sc_eta(eta), self.rho_coef.T)

    def _quad_grids(self):
        ch = self.rect.chart
        etas, xg = ch.grids()
        wts = ct.cc_weights(M_NODES)
        return ch, etas, xg, wts

    def integrate(self, g=None):
        """mu(g) = int rho dLeb over the slanted chart domain (g ambient or None)."""
        ch, etas, xg, wts = self._quad_grids()
        E = np.broadcast_to(etas[:, None], xg.shape)
        th = ch.theta(xg, E)
        vals = self.rho_hat(xg, E) * ch.dtheta_deta(xg, E)
        if g is not None:
            vals = vals * g(wrap(xg), wrap(th))
        inner = (xg[:, -1] - xg[:, 0]) / 2.0 * (vals @ wts)
        return float(0.5 * np.dot(inner, wts))

    def mass(self):
        return self.integrate()

    def leb_area(self):
        ch, etas, xg, wts = self._quad_grids()
        E = np.broadcast_to(etas[:, None], xg.shape)
        vals = ch.dtheta_deta(xg, E)
        inner = (xg[:, -1] - xg[:, 0]) / 2.0 * (vals @ wts)
        return float(0.5 * np.dot(inner, wts))

    def normalized(self):
        return StandardPatch(
            rect=self.rect, rho_coef=self.rho_coef / self.mass(), R=self.R,
            ledger=self.ledger,
        )

    # -- geometry ------------------------------------------------------------

    def fibre_heights(self, sys, n_fibres=9, s_eval=None):
        """Heights of sampled maximal centre fibres, measured by integration."""
        ch = self.rect.chart
        etas = _eta_nodes()
        xl, xr = ch.xl(etas), ch.xr(etas)
        lo, hi = float(np.max(xl)), float(np.min(xr))
        xs = np.linspace(lo, hi, n_fibres + 2)[1:-1]
        th0 = ch.theta(xs, np.zeros_like(xs))
        span = float(np.max(ch.theta(xs, np.ones_like(xs)) - th0)) * 1.25
        ts, xcs = integrate_centre_curves(sys, xs, th0, span, s_eval=s_eval)
        heights = np.empty(n_fibres)
        for j in range(n_fibres):
            # crossing of the centre curve with the top leaf (eta = 1)
            diff = ts[:, j] - ch.theta(xcs[:, j], np.ones(ts.shape[0]))
            k = int(np.argmax(diff >= 0.0))
            k = min(max(k, 1), ts.shape[0] - 1)
            t0v, t1v = diff[k - 1], diff[k]
            frac = t0v / (t0v - t1v) if t0v != t1v else 0.5
            t_hit = ts[k - 1, j] + frac * (ts[k, j] - ts[k - 1, j])
            heights[j] = t_hit - th0[j]
        return heights

    def gauges(self, sys, s_eval=None):
        """Measured (Z, R, M, L) per the gauge definitions."""
        led = self.ledger
        heights = self.fibre_heights(sys, s_eval=s_eval)
        Zm = max(led.Z_under, led.Delta * sys.epsilon / float(np.min(heights)))
        logrho = ct.fit2d(np.log(np.maximum(_tensor_vals(self), 1e-300)))
        d = ambient_derivs(self.rect.chart, logrho)
        eps = sys.epsilon
        grad = np.hypot(d["vx"], eps * d["vt"])
        h11, h12, h22 = d["vxx"], eps * d["vxt"], eps * eps * d["vtt"]
        tr = h11 + h22
        det = h11 * h22 - h12 * h12
        disc = np.sqrt(np.maximum(tr * tr - 4 * det, 0.0))
        hess = np.maximum(np.abs(tr + disc), np.abs(tr - disc)) / 2.0
        Rm = max(float(np.max(grad)), float(np.max(hess)) / led.frakE)
        Mm = max(Zm, Rm)
        return PatchGauges(Z=Zm, R=Rm, M=Mm, L=Mm**led.gamma)

    # -- sampling ------------------------------------------------------------

    def sample(self, n, rng):
        """Rejection sampling of (x, theta) from the patch measure."""
        ch = self.rect.chart
        etas, xg = ch.grids()
        E = np.broadcast_to(etas[:, None], xg.shape)
        wmax = float(np.max(self.rho_hat(xg, E) * ch.dtheta_deta(xg, E))) * 1.5
        xs_out = []
        got = 0
        while got < n:
            m = max(1024, int((n - got) * 2.5))
            eta = rng.random(m)
            xl, xr = ch.xl(eta), ch.xr(eta)
            x = xl + rng.random(m) * (xr - xl)
            w = self.rho_hat(x, eta) * ch.dtheta_deta(x, eta) * (xr - xl)
            wscale = wmax * float(np.max(ch.xr(_eta_nodes()) - ch.xl(_eta_nodes())))
            acc = rng.random(m) * wscale < w
            xa, ea = x[acc], eta[acc]
            xs_out.append((xa, ch.theta(xa, ea)))
            got += len(xa)
        x = np.concatenate([p[0] for p in xs_out])[:n]
        t = np.concatenate([p[1] for p in xs_out])[:n]
        return wrap(x), wrap(t)


def _tensor_vals(patch):
    """Density values on the tensor node grid of the common window."""
    ch = patch.rect.chart
    xt = ct.nodes(M_NODES, ch.A, ch.B)
    etas = _eta_nodes()
    X, E = np.meshgrid(xt, etas, indexing="xy")
    return patch.rho_hat(X.T, E.T).T  # shape (eta, x)


@dataclass
class PatchFamily:
    patches: list
    weights: np.ndarray
    mass_defect: float = 0.0
    records: list = field(default_factory=list)

    def integrate(self, g=None):
        return float(
            sum(w * p.integrate(g) for w, p in zip(self.weights, self.patches))
        )

    def sample(self, n, seed=0):
        rng = stream(seed, "patch-family-sample")
        counts = rng.multinomial(n, self.weights / self.weights.sum())
        xs, ts = [], []
        for cnt, patch in zip(counts, self.patches):
            if cnt:
                x, t = patch.sample(cnt, rng)
                xs.append(x)
                ts.append(t)
        return np.concatenate(xs), np.concatenate(ts)

    def mean_L(self, sys, sample_k=None, seed=0):
        """Weighted mean of the gauge L = M^gamma (optionally on a weight-sampled subset)."""
        s_eval = _slope_field(sys)
        if sample_k is None or sample_k >= len(self.patches):
            idx = np.arange(len(self.patches))
            w = self.weights
        else:
            rng = stream(seed, "mean-L-sample")
            idx = rng.choice(len(self.patches), size=sample_k, replace=False,
                             p=self.weights / self.weights.sum())
            w = np.ones(sample_k)
        vals = np.array([self.patches[i].gauges(sys, s_eval=s_eval).L for i in idx])
        return float(np.dot(w, vals) / w.sum())

    def proper(self, sys, ledger, sample_k=None):
        return self.mean_L(sys, sample_k=sample_k) <= 2.0 * ledger.B_prop


# -- construction -------------------------------------------------------------------


def _taylor_extend(G, a_ext, b_ext, m=M_NODES):
    """C^3 Taylor extension of a ChebFun beyond its domain, refit on [a_ext, b_ext]."""
    xs = ct.nodes(m, a_ext, b_ext)
    vals = np.empty_like(xs)
    inside = (xs >= G.a) & (xs <= G.b)
    vals[inside] = G(xs[inside])
    for side, anchor in ((xs < G.a, G.a), (xs > G.b, G.b)):
        if np.any(side):
            dx = xs[side] - anchor
            d0, d1 = G(anchor), G.deriv(1)(anchor)
            d2, d3 = G.deriv(2)(anchor), G.deriv(3)(anchor)
            vals[side] = d0 + dx * (d1 + dx * (d2 / 2.0 + dx * d3 / 6.0))
    return ct.ChebFun.from_values(vals, a_ext, b_ext)


def build_rectangle(sys, ledger, G0, target_height, s_eval=None):
    """Standard rectangle(s) over the bottom curve G0 with the given fibre height.

    The top curve is the centre-flow transport of G0 by target_height,
    re-fitted as a graph (least squares on 65 samples); sides are the centre
    curves through G0's endpoints; the foliation is the affine interpolation
    between the Taylor-extended boundary curves.  When the horizontal extent
    reaches delta the rectangle is split along the centre manifold through
    the midpoint, so a list of one or two foliated rectangles is returned.
    """
    led = ledger
    eps = sys.epsilon
    lo_h = led.Delta * eps / led.Z_under * 1.25
    hi_h = led.Delta * eps * 0.8
    if not lo_h <= target_height <= hi_h:
        raise HeightOutOfRange(f"target height {target_height:.3g} not in [{lo_h:.3g}, {hi_h:.3g}]")
    if not led.patch_feasible:
        raise ChartInfeasible(
            f"patch geometry infeasible at eps={eps:.3g}; need eps <= {led.patch_max_eps:.3g}"
        )
    if s_eval is None:
        s_eval = _slope_field(sys)
    if G0.length >= led.delta:
        mid = 0.5 * (G0.a + G0.b)
        left = StandardCurve(G0.G.restricted(G0.a, mid), z=max(2.0, 2 * G0.z))
        right = StandardCurve(G0.G.restricted(mid, G0.b), z=max(2.0, 2 * G0.z))
        return build_rectangle(sys, led, left, target_height, s_eval) + build_rectangle(
            sys, led, right, target_height, s_eval
        )

    # transport 65 samples of G0 along centre curves
    n_samp = 65
    xs0 = ct.nodes(n_samp, G0.a, G0.b)
    th0 = G0.G(xs0)
    ts, xcs = integrate_centre_curves(sys, xs0, th0, target_height, s_eval=s_eval)
    X_top, T_top = xcs[-1], ts[-1]
    order = np.argsort(X_top)
    X_top, T_top = X_top[order], T_top[order]
    # least-squares degree-32 fit of the top graph
    a1, b1 = float(X_top[0]), float(X_top[-1])
    V = C.chebvander(ct.scale(X_top, a1, b1), ct.DEGREE)
    coef, res, _, _ = np.linalg.lstsq(V, T_top, rcond=None)
    G1 = ct.ChebFun(ct.chop(coef), a1, b1)
    fit_resid = float(np.max(np.abs(G1(X_top) - T_top)))

    A = min(G0.a, a1)
    B = max(G0.b, b1)
    G0e = _taylor_extend(G0.G, A, B)
    G1e = _taylor_extend(G1, A, B)

    etas = _eta_nodes()
    xt = ct.nodes(M_NODES, A, B)
    theta_vals = (1.0 - etas)[:, None] * G0e(xt)[None, :] + etas[:, None] * G1e(xt)[None, :]

    # side curves: centre manifolds through G0's endpoints, sampled per leaf
    side_l = CentreCurve(float(ts[0, 0]), float(ts[-1, 0]), ts[:, 0], xcs[:, 0])
    side_r = CentreCurve(float(ts[0, -1]), float(ts[-1, -1]), ts[:, -1], xcs[:, -1])
    xl_vals = np.empty(M_NODES)
    xr_vals = np.empty(M_NODES)
    for i, e in enumerate(etas):
        xl_vals[i] = _cross_side(side_l, G0e, G1e, e)
        xr_vals[i] = _cross_side(side_r, G0e, G1e, e)
    chart = chart_from_leaf_values(A, B, theta_vals, xl_vals, xr_vals)
    Z = max(led.Z_under, led.Delta * eps / target_height)
    rect = FoliatedRectangle(chart=chart, z=G0.z, Z=Z)
    rect._fit_residual = fit_resid
    return [rect]


def _cross_side(side, G0e, G1e, eta):
    """x-coordinate where the side centre curve crosses the leaf at level eta."""
    th = 0.5 * (side.theta0 + side.theta1)
    for _ in range(60):
        x = side.x_at(th)
        target = (1.0 - eta) * G0e(x) + eta * G1e(x)
        if abs(target - th) < 1e-14:
            break
        th = target
    return side.x_at(th)


def build_foliation(rect, ledger, validate_leaves=True, sanity_factor=10.0):
    """Measure the eta-regularity bounds of a foliated rectangle.

    All 33 sampled leaves must validate as prestandard curves at the 3z
    level (LeafValidationFailed otherwise); the measured bounds are compared
    against the C#*Z sanity ceiling and flagged when exceeded by the factor.
    """
    from .pairs import validate_pair  # local import to avoid cycles

    ch = rect.chart
    if validate_leaves:
        uniform = StandardDensity(ct.ChebFun(np.array([1.0]), 0, 1), r=0.0)
        for e in _eta_nodes():
            leaf = ch.leaf_fun(e)
            if leaf.length < ledger.delta / (3.0 * max(rect.z, 2.0) * 1.05):
                raise LeafValidationFailed(f"leaf at eta={e:.3f} too short")
            rho = ct.ChebFun(np.array([1.0 / leaf.length]), leaf.a, leaf.b)
            pair = StandardPair(StandardCurve(leaf, z=3 * rect.z), StandardDensity(rho, 0.0))
            val = validate_pair(ledger, pair, prestandard=True)
            bad = [v for v in val.violations if "normalization" not in v]
            if bad:
                raise LeafValidationFailed(f"leaf at eta={e:.3f}: {bad}")
    U = _log_dtheta_deta_coef(ch)
    d = ambient_derivs(ch, U)
    dlog = float(np.max(np.hypot(d["vx"], d["vt"])))
    h11, h12, h22 = d["vxx"], d["vxt"], d["vtt"]
    tr = h11 + h22
    det = h11 * h22 - h12 * h12
    disc = np.sqrt(np.maximum(tr * tr - 4 * det, 0.0))
    Hlog = float(np.max(np.maximum(np.abs(tr + disc), np.abs(tr - disc)) / 2.0))
    fol = Foliation(chart=ch, dlog_deta_bound=dlog, Hlog_deta_bound=Hlog)
    fol.sanity_exceeded = dlog > sanity_factor * max(1.0, rect.Z)
    return fol


def _log_dtheta_deta_coef(chart):
    """Chart tensor of log d(theta)/d(eta) (i.e. -log dtheta/deta pulled to eta-chart)."""
    cT = C.chebder(chart.theta_coef, axis=0) * 2.0
    xt = ct.nodes(M_NODES, chart.A, chart.B)
    etas = _eta_nodes()
    vals = C.chebval2d(
        np.broadcast_to(chart._sc_x(xt)[None, :], (M_NODES, M_NODES)),
        np.broadcast_to(chart._sc_eta(etas)[:, None], (M_NODES, M_NODES)),
        cT.T,
    )
    return ct.fit2d(-np.log(np.maximum(vals, 1e-300)))


def uniform_patch(rect, ledger):
    """Patch with Lebesgue-uniform density on the rectangle."""
    p = StandardPatch(
        rect=rect, rho_coef=np.zeros((1, 1)), R=0.0, ledger=ledger
    )
    p.rho_coef = np.array([[1.0]])
    area = p.leb_area()
    p.rho_coef = np.array([[1.0 / area]])
    return p


def patch_from_density(rect, ledger, density_fn):
    """Patch from an ambient density callable (normalized over the rectangle)."""
    ch = rect.chart
    xt = ct.nodes(M_NODES, ch.A, ch.B)
    etas = _eta_nodes()
    X = np.broadcast_to(xt[None, :], (M_NODES, M_NODES))
    E = np.broadcast_to(etas[:, None], (M_NODES, M_NODES))
    vals = density_fn(wrap(X), wrap(ch.theta(X, E)))
    patch = StandardPatch(rect=rect, rho_coef=ct.fit2d(vals), R=np.nan, ledger=ledger)
    patch = patch.normalized()
    return patch


# -- disintegration and splitting -----------------------------------------------------


def disintegrate(patch, eta_star, foliation=None):
    """Leaf standard pair at level eta_star with the regularity assertion.

    The leaf density is rho(G_eta*(x)) * dtheta/deta(x, eta*) normalized by
    nu_eta*; its measured roughness must respect the bound assembled from
    the patch roughness and the stored foliation eta-bounds.
    """
    ch = patch.rect.chart
    leaf = ch.leaf_fun(eta_star)
    xs = ct.nodes(M_NODES, leaf.a, leaf.b)
    e = np.full_like(xs, float(eta_star))
    vals = patch.rho_hat(xs, e) * ch.dtheta_deta(xs, e)
    rho = ct.ChebFun.from_values(vals, leaf.a, leaf.b)
    nu = rho.integral()
    rho = rho.scaled(1.0 / nu)
    pair = StandardPair(
        StandardCurve(leaf, z=patch.rect.z),
        StandardDensity(rho, r=np.nan),
    )
    if foliation is not None and patch.ledger is not None:
        led = patch.ledger
        r1, r2 = pair.density.log_deriv_sups()
        r_meas = max(r1, r2 / led.frakD)
        c1b = led.c1bar
        kap1 = math.sqrt(1.0 + c1b * c1b)
        R = patch.R if np.isfinite(patch.R) else 0.0
        b1 = R * kap1 + foliation.dlog_deta_bound * math.sqrt(1 + (led.epsilon * c1b) ** 2)
        b2 = (
            led.frakE * R * kap1**2 + 2.0 * R * led.c2bar
            + foliation.Hlog_deta_bound * (1 + (led.epsilon * c1b) ** 2)
            + 2.0 * foliation.dlog_deta_bound * led.epsilon * led.c2bar
        )
        r_formula = max(b1, (b2 + b1 * b1) / led.frakD)
        if r_meas > r_formula * 1.05 + 1e-9:
            raise LeafValidationFailed(
                f"leaf roughness {r_meas:.3g} exceeds formula bound {r_formula:.3g}"
            )
        pair.r_formula_bound = r_formula
    return pair, float(nu)


def split_density(patch, sys):
    """Split rho = tau * uniform + (1 - tau) * residual with tau = exp(-2*Delta*R)/2."""
    led = patch.ledger
    R = patch.gauges(sys).R
    tau = 0.5 * math.exp(-2.0 * led.Delta * R)
    area = patch.leb_area()
    uni = uniform_patch(patch.rect, led)
    resid_coef = (patch.rho_coef.copy()) / (1.0 - tau)
    resid_coef[0, 0] -= tau / area / (1.0 - tau)
    resid = StandardPatch(rect=patch.rect, rho_coef=resid_coef, R=np.nan, ledger=led)
    return tau, uni, resid


# -- adapted cutting ------------------------------------------------------------------


def cut_adapted(patch, m_adapted, T0, sys, s_eval=None):
    """Partition along eta-levels into m-adapted patches (equal centre heights).

    Requires Z > 4*exp(Lambda_c*T0); masses are assigned by restriction and
    the pieces carry the affinely reparametrized foliation.
    """
    led = patch.ledger
    if patch.rect.Z <= 4.0 * math.exp(led.Lambda_c * T0):
        raise ZTooSmall("adapted cutting requires Z > 4*exp(Lambda_c*T0)")
    eps = sys.epsilon
    bound = math.exp(-led.Lambda_c * m_adapted * eps) * led.Delta * eps
    heights = patch.fibre_heights(sys, n_fibres=3, s_eval=s_eval)
    hmax = float(np.max(heights))
    if hmax <= bound:
        patch.rect.adapted_m = m_adapted
        return [patch], np.array([1.0])
    N = int(math.ceil(2.0 * hmax / bound))
    # equal centre-height subdivision along the middle fibre
    ch = patch.rect.chart
    etas = _eta_nodes()
    xm = 0.5 * (float(np.max(ch.xl(etas))) + float(np.min(ch.xr(etas))))
    th_levels = ch.theta(np.full(M_NODES, xm), etas)
    cuts_th = np.linspace(th_levels[0], th_levels[-1], N + 1)
    cut_etas = np.interp(cuts_th, th_levels, etas)
    pieces, masses = [], []
    for j in range(N):
        sub = _restrict_eta(patch, cut_etas[j], cut_etas[j + 1])
        mass = sub.mass()
        sub = sub.normalized()
        sub.rect.adapted_m = m_adapted
        pieces.append(sub)
        masses.append(mass)
    masses = np.array(masses)
    return pieces, masses / masses.sum()


def _restrict_eta(patch, e0, e1):
    """Chart restriction to eta in [e0, e1], affinely remapped to [0, 1]."""
    ch = patch.rect.chart
    etas_new = e0 + (e1 - e0) * _eta_nodes()
    xt = ct.nodes(M_NODES, ch.A, ch.B)
    X = np.broadcast_to(xt[None, :], (M_NODES, M_NODES))
    E = np.broadcast_to(etas_new[:, None], (M_NODES, M_NODES))
    theta_vals = ch.theta(X, E)
    chart = chart_from_leaf_values(
        ch.A, ch.B, theta_vals, ch.xl(etas_new), ch.xr(etas_new)
    )
    rho_vals = patch.rho_hat(X, E)
    rect = FoliatedRectangle(chart=chart, z=patch.rect.z, Z=patch.rect.Z,
                             adapted_m=patch.rect.adapted_m)
    return StandardPatch(rect=rect, rho_coef=ct.fit2d(rho_vals), R=patch.R,
                         ledger=patch.ledger)


# -- pushforward ---------------------------------------------------------------------


def pushforward_patch(sys, ledger, patch, n=1, s_eval=None, record=None):
    """n-step pushforward as a weighted family of standard patches.

    One step at a time: the bottom leaf image is partitioned per the pair
    rule, the partition is transported along centre manifolds, leaves are
    pushed leafwise and refit over the image window, and the density is
    pushed by the change of variables.  Gauge bookkeeping (z_n, Z_n and the
    per-piece contraction ratio M_{n,j} data) is accumulated in `record`.
    """
    if s_eval is None:
        s_eval = _slope_field(sys)
    fam = [(patch.normalized(), 1.0)]
    records = []
    for step in range(n):
        new = []
        for pat, wgt in fam:
            pieces, masses = _push_one(sys, ledger, pat, s_eval, records)
            new.extend((p, wgt * m) for p, m in zip(pieces, masses))
        fam = new
    patches = [p for p, _ in fam]
    weights = np.array([w for _, w in fam])
    out = PatchFamily(patches=patches, weights=weights, records=records)
    if record is not None:
        record.extend(records)
    return out


def _push_one(sys, ledger, patch, s_eval, records):
    eps = sys.epsilon
    ch = patch.rect.chart
    etas = _eta_nodes()
    bottom = ch.leaf_fun(0.0)
    f_G, f_G_prime, _ = _graph_maps(sys, StandardCurve(bottom, z=patch.rect.z))
    a, b = bottom.a, bottom.b
    Ja, Jb = f_G(a), f_G(b)
    n_cut = max(1, int(math.ceil((Jb - Ja) / (ledger.delta * math.exp(-ledger.trim_kappa)))))
    edges = np.linspace(Ja, Jb, n_cut + 1)
    xcut_bottom = ct.invert_monotone(f_G, f_G_prime, edges, a, b)
    xcut_bottom[0], xcut_bottom[-1] = a, b

    # transport interior cut points along centre manifolds; crossing with leaves
    xcut = np.empty((n_cut + 1, M_NODES))  # [cut index, leaf level]
    xcut[:, 0] = xcut_bottom
    if n_cut >= 0:
        th0 = ch.theta(xcut_bottom, np.zeros(n_cut + 1))
        span = float(np.max(ch.theta(xcut_bottom, np.ones(n_cut + 1)) - th0)) * 1.3
        ts_c, xs_c = integrate_centre_curves(sys, xcut_bottom, th0, span, s_eval=s_eval)
        for idx in range(n_cut + 1):
            curve = CentreCurve(float(ts_c[0, idx]), float(ts_c[-1, idx]),
                                ts_c[:, idx], xs_c[:, idx])
            for i, e in enumerate(etas):
                if i == 0:
                    continue
                xcut[idx, i] = _cross_leaf(curve, ch, e)
    # clamp to side curves for the outermost cuts
    xcut[0] = ch.xl(etas)
    xcut[-1] = ch.xr(etas)

    pieces, masses = [], []
    z_new = max(0.8 * patch.rect.z, 2.0)
    Z_new = math.exp(ledger.Lambda_c * eps) * patch.rect.Z
    for j in range(n_cut):
        piece, mass, zeta_info = _push_piece(
            sys, ledger, patch, etas, xcut[j], xcut[j + 1], z_new, Z_new
        )
        pieces.append(piece)
        masses.append(mass)
        records.append(zeta_info)
    masses = np.array(masses)
    return pieces, masses / masses.sum()


def _cross_leaf(curve, chart, eta):
    th = 0.5 * (curve.theta0 + curve.theta1)
    for _ in range(60):
        x = curve.x_at(th)
        target = chart.theta(x, eta)
        if abs(target - th) < 1e-14:
            break
        th = target
    return curve.x_at(th)


def _push_piece(sys, ledger, patch, etas, xl_src, xr_src, z_new, Z_new):
    eps = sys.epsilon
    ch = patch.rect.chart
    m = M_NODES

    # mass of the source piece (chart quadrature over the sub-domain)
    wts = ct.cc_weights(m)
    xg_src = 0.5 * (xl_src + xr_src)[:, None] + 0.5 * (xr_src - xl_src)[:, None] * ct._nodes_unit(m)
    E = np.broadcast_to(etas[:, None], xg_src.shape)
    w_src = patch.rho_hat(xg_src, E) * ch.dtheta_deta(xg_src, E)
    inner = (xr_src - xl_src) / 2.0 * (w_src @ wts)
    mass = float(0.5 * np.dot(inner, wts))

    # leafwise image endpoints
    th_l = ch.theta(xl_src, etas)
    th_r = ch.theta(xr_src, etas)
    yl = sys.fibre_degree * xl_src + sys.f_pert(wrap(xl_src), wrap(th_l))
    yr = sys.fibre_degree * xr_src + sys.f_pert(wrap(xr_src), wrap(th_r))

    pad = 0.02 * float(np.min(yr - yl))
    Abar = float(np.min(yl)) - pad
    Bbar = float(np.max(yr)) + pad
    ybar = ct.nodes(m, Abar, Bbar)

    # leafwise Newton inversion of f along each source leaf, batched
    E2 = np.broadcast_to(etas[:, None], (m, m))
    targets = np.broadcast_to(ybar[None, :], (m, m))

    def F(xm):
        th = ch.theta(xm, E2)
        return sys.fibre_degree * xm + sys.f_pert(wrap(xm), wrap(th))

    def Fp(xm):
        th = ch.theta(xm, E2)
        fx = sys.fibre_degree + sys.f_pert.deriv_eval(wrap(xm), wrap(th), 1, 0)
        ftv = sys.f_pert.deriv_eval(wrap(xm), wrap(th), 0, 1)
        return fx + ftv * ch.dtheta_dx(xm, E2)

    lo = np.broadcast_to((xl_src - 2 * pad)[:, None], (m, m))
    hi = np.broadcast_to((xr_src + 2 * pad)[:, None], (m, m))
    xpre = ct.invert_monotone(F, Fp, targets, lo, hi)

    th_pre = ch.theta(xpre, E2)
    th_img = th_pre + eps * sys.omega(wrap(xpre), wrap(th_pre))
    # rebase the image window into [0,1) x [0,1)
    shift = -math.floor(Abar)
    vshift = -math.floor(float(np.mean(th_img)))
    J = sys.jacobian(wrap(xpre), wrap(th_pre))
    detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    rho_img = patch.rho_hat(xpre, E2) / detJ / mass

    chart = chart_from_leaf_values(
        Abar + shift, Bbar + shift, th_img + vshift, yl + shift, yr + shift
    )
    rect = FoliatedRectangle(chart=chart, z=z_new, Z=Z_new,
                             adapted_m=max(patch.rect.adapted_m - 1, 0))
    piece = StandardPatch(rect=rect, rho_coef=ct.fit2d(rho_img), R=np.nan,
                          ledger=ledger)
    piece = piece.normalized()

    # contraction bookkeeping for the measured-vs-predicted M_{n,j} report:
    # the leafwise image/source height ratio approximates prod(upsilon)
    src_h = float(np.median(ch.theta(xl_src, etas)[-1] - ch.theta(xl_src, etas)[0]))
    img_h = float(np.median(th_img[-1] - th_img[0]))
    info = {
        "mass": mass,
        "height_ratio": img_h / src_h if src_h else float("nan"),
        "z": z_new,
        "Z": Z_new,
    }
    return piece, mass, info


# -- smooth measures and telemetry ----------------------------------------------------


def smooth_measure_to_family(sys, ledger, density_fn, kappa=None, kappa_bound=4.0 * math.pi):
    """Disintegrate a smooth probability density as a proper patch family.

    The torus is partitioned into horizontal strips of height between
    Delta*eps/2 and Delta*eps, each strip into rectangles whose sides are
    centre manifolds through equally spaced base points (horizontal
    segments are standard curves, so the strip rectangles are standard and
    the horizontal foliation is affine).  Patch weights are the density
    masses; KappaTooLarge is raised when ||d log rho||_C1 exceeds the bound.
    """
    eps = sys.epsilon
    led = ledger
    h_strip = led.Delta * eps
    if h_strip > 0.5:
        raise ChartInfeasible(
            f"strip height Delta*eps = {h_strip:.3g} exceeds 1/2; reduce epsilon"
        )
    if kappa is not None and kappa > kappa_bound:
        raise KappaTooLarge(f"kappa = {kappa:.3g} exceeds the configured bound")
    k_t = int(math.ceil(1.0 / h_strip))
    if 1.0 / k_t < h_strip / 2.0 - 1e-12:
        raise ChartInfeasible("no admissible strip count for this Delta*eps")
    m_x = int(math.ceil(1.0 / (0.8 * led.delta)))
    if 1.0 / m_x < 0.6 * led.delta - 1e-12:
        raise ChartInfeasible("no admissible horizontal interval count for delta")
    s_eval = _slope_field(sys)
    h = 1.0 / k_t
    w = 1.0 / m_x
    # centre manifolds through the grid base points, integrated once per strip
    patches, weights = [], []
    etas = _eta_nodes()
    for j in range(k_t):
        th0 = j * h
        x_base = np.arange(m_x + 1) * w
        ts, xs = integrate_centre_curves(sys, x_base, np.full(m_x + 1, th0), h,
                                         s_eval=s_eval)
        # side x-positions at the leaf levels th0 + eta*h
        t_lvl = th0 + etas * h
        side_x = np.empty((m_x + 1, M_NODES))
        for i in range(m_x + 1):
            side_x[i] = np.interp(t_lvl, ts[:, i], xs[:, i])
        for i in range(m_x):
            xl_vals = side_x[i]
            xr_vals = side_x[i + 1]
            pad = 0.02 * w
            A = float(np.min(xl_vals)) - pad
            B = float(np.max(xr_vals)) + pad
            theta_vals = np.broadcast_to(t_lvl[:, None], (M_NODES, M_NODES)).copy()
            chart = chart_from_leaf_values(A, B, theta_vals, xl_vals, xr_vals)
            rect = FoliatedRectangle(chart=chart, z=max(led.delta / w, 2.0),
                                     Z=led.Z_under)
            patch = patch_from_density(rect, led, density_fn)
            patches.append(patch)
            weights.append(_cell_mass(rect, density_fn))
    weights = np.array(weights)
    fam = PatchFamily(patches=patches, weights=weights / weights.sum())
    return fam


def _cell_mass(rect, density_fn):
    ch = rect.chart
    etas, xg = ch.grids()
    wts = ct.cc_weights(M_NODES)
    E = np.broadcast_to(etas[:, None], xg.shape)
    th = ch.theta(xg, E)
    vals = density_fn(wrap(xg), wrap(th)) * ch.dtheta_deta(xg, E)
    inner = (xg[:, -1] - xg[:, 0]) / 2.0 * (vals @ wts)
    return float(0.5 * np.dot(inner, wts))


def gauge_telemetry(sys, ledger, family, horizon_steps, checkpoints, max_pieces=64,
                    seed=0, T0=None):
    """Iterate pushforward with adapted cutting and resampling; record gauges.

    Emits (step, mean_L, max_M, proper_flag, piece_count) rows at the
    checkpoints.  Pieces are resampled by weight (largest remainder) when
    the family outgrows max_pieces.
    """
    from .pairs import _largest_remainder_resample

    if T0 is None:
        T0 = ledger.T0
    s_eval = _slope_field(sys)
    pats = list(family.patches)
    wts = np.array(family.weights, dtype=float)
    rows = []
    cps = set(checkpoints)
    n0 = max(1, int(math.floor(T0 / sys.epsilon)))

    def emit(step):
        vals = np.array([p.gauges(sys, s_eval=s_eval).M for p in pats])
        Ls = vals**ledger.gamma
        mean_L = float(np.dot(wts, Ls) / wts.sum())
        rows.append({
            "step": step, "mean_L": mean_L, "max_M": float(vals.max()),
            "proper": mean_L <= 2.0 * ledger.B_prop, "pieces": len(pats),
        })

    emit(0)
    step = 0
    while step < horizon_steps:
        new_p, new_w = [], []
        for p, wgt in zip(pats, wts):
            pieces, masses = cut_adapted(p, 1, T0, sys, s_eval=s_eval)
            for q, mass in zip(pieces, masses):
                fam1 = pushforward_patch(sys, ledger, q, n=1, s_eval=s_eval)
                new_p.extend(fam1.patches)
                new_w.extend(wgt * mass * fam1.weights)
        pats, wts = new_p, np.array(new_w)
        if len(pats) > max_pieces:
            idx = _largest_remainder_resample(wts, max_pieces, seed)
            pats = [pats[i] for i in idx]
            wts = np.full(len(idx), wts.sum() / len(idx))
        wts = wts / wts.sum()
        step += 1
        if step in cps or step == horizon_steps:
            emit(step)
    return rows
