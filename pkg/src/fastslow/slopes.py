"""Centre slope fields, expansion factors and inverse-Jacobian identities.

Notation (for the map F_eps with orbit p_k = F_eps^k(p)):

* s_n        -- eps = 0 centre slopes, (s_n(p), 1) = [dF_0^n]^{-1}(0,1);
* s_eps_n    -- their eps > 0 analogue, Upsilon_n(p)*(s_eps_n(p),1) = [dF_eps^n]^{-1}(0,1);
* w_eps_n    -- unstable slopes, dF_eps^n(1,0) = Gamma_n(p)*(1, eps*w_eps_n(p));
* upsilon    -- one-step centre expansion 1 + eps*(dtheta omega + dx omega * s_eps_*);
* zeta_n     -- eps * sum_{k<n} psi(p_k) for the regularized psi = psi_{n0}.

The eps > 0 slopes are computed by folding

    s_eps_n(p_0) = Xi_minus(p_0, s_eps_{n-1}(p_1))

backward along a forward orbit; the fold is a uniform contraction in the
slope argument with a certified factor sigma_hat derived from map norms.
All routines are vectorized over arrays of base points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BandViolated, ContractionNotCertified
from .system import wrap


# -- eps = 0 field ------------------------------------------------------------


def slope_s_n(sys, x, theta, n):
    """Explicit sum for s_n along the F_0 orbit (theta is fixed by F_0)."""
    x = wrap(x)
    theta = np.asarray(theta, dtype=float)
    s = np.zeros(np.broadcast(x, theta).shape)
    prod = np.ones_like(s)
    xe = np.broadcast_to(x, s.shape).copy()
    for _ in range(n):
        fx = sys.fibre_degree + sys.f_pert.deriv_eval(xe, theta, 1, 0)
        ft = sys.f_pert.deriv_eval(xe, theta, 0, 1)
        prod = prod * fx
        s = s - ft / prod
        xe = wrap(sys.fibre_degree * xe + sys.f_pert(xe, theta))
    return s


def s_star_order(sys, tol):
    """Truncation order making the eps=0 tail sum certifiably below tol."""
    ft = sys.f_pert.sup_bound(0, 1)
    if ft == 0.0:
        return 1
    lam = sys.lam
    # tail after n terms <= ft * lam^-(n+1) / (1 - 1/lam)
    n = math.log(ft / (tol * (1.0 - 1.0 / lam) * lam)) / math.log(lam)
    return max(1, int(math.ceil(n)))


def slope_s_star0(sys, x, theta, tol=1e-12):
    """Invariant eps = 0 slope field s_* with certified truncation error < tol."""
    return slope_s_n(sys, x, theta, s_star_order(sys, tol))


def psi_star(sys, x, theta, tol=1e-12):
    """psi_* = dtheta omega + dx omega * s_* (the eps = 0 centre derivative of omega)."""
    wt = sys.omega.deriv_eval(x, theta, 0, 1)
    wx = sys.omega.deriv_eval(x, theta, 1, 0)
    return wt + wx * slope_s_star0(sys, x, theta, tol)


def psi_star_sup(sys, grid=256, tol=1e-10):
    """Grid sup of |psi_*| (used for the centre expansion band Lambda_c)."""
    u = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(u, u, indexing="ij")
    return float(np.max(np.abs(psi_star(sys, X, T, tol))))


def lambda_c(sys, grid=256):
    """Band constant Lambda_c = sup|psi_*| + 1 for the centre expansion products."""
    return psi_star_sup(sys, grid) + 1.0


# -- one-step recursions ------------------------------------------------------


def xi_minus(sys, x, theta, s):
    """Backward slope recursion Xi^-(p, s)."""
    eps = sys.epsilon
    fx = sys.fibre_degree + sys.f_pert.deriv_eval(x, theta, 1, 0)
    ft = sys.f_pert.deriv_eval(x, theta, 0, 1)
    wx = sys.omega.deriv_eval(x, theta, 1, 0)
    wt = sys.omega.deriv_eval(x, theta, 0, 1)
    return ((1.0 + eps * wt) * s - ft) / (fx - eps * wx * s)


def xi_plus(sys, x, theta, u):
    """Forward unstable-slope recursion Xi^+(p, u)."""
    eps = sys.epsilon
    fx = sys.fibre_degree + sys.f_pert.deriv_eval(x, theta, 1, 0)
    ft = sys.f_pert.deriv_eval(x, theta, 0, 1)
    wx = sys.omega.deriv_eval(x, theta, 1, 0)
    wt = sys.omega.deriv_eval(x, theta, 0, 1)
    return (wx + (1.0 + eps * wt) * u) / (fx + eps * ft * u)


def sigma_hat(sys):
    """Certified sup of |d Xi^- / d s| over |s| <= chi_c, from map norms.

    Raises ContractionNotCertified when the bound is >= 1 (or the
    denominator lower bound fails).
    """
    eps = sys.epsilon
    chi_c = sys.M
    wt = sys.omega.sup_bound(0, 1)
    wx = sys.omega.sup_bound(1, 0)
    ft = sys.f_pert.sup_bound(0, 1)
    dmin = sys.lam - eps * wx * chi_c
    if dmin <= 0.0:
        raise ContractionNotCertified("denominator of Xi^- not bounded away from 0")
    nmax = (1.0 + eps * wt) * chi_c + ft
    sig = (1.0 + eps * wt) / dmin + eps * wx * nmax / dmin**2
    if sig >= 1.0:
        raise ContractionNotCertified(f"sigma_hat = {sig:.4g} >= 1")
    return sig


# -- eps > 0 slopes by backward folding ----------------------------------------


def backward_fold(sys, xs, ts):
    """Fold Xi^- backward along a stored orbit p_0..p_n.

    Returns (s_chain, logU_chain): s_chain[j] = s_eps_j(p_{n-j}) and
    logU_chain[j] = log Upsilon_j(p_{n-j}); in particular entry [n] is the
    value at the orbit base point p_0.
    """
    n = xs.shape[0] - 1
    eps = sys.epsilon
    s_chain = np.zeros_like(xs)
    logU = np.zeros_like(xs)
    s = np.zeros_like(xs[0])
    for j in range(1, n + 1):
        xk, tk = xs[n - j], ts[n - j]
        s = xi_minus(sys, xk, tk, s)
        wt = sys.omega.deriv_eval(xk, tk, 0, 1)
        wx = sys.omega.deriv_eval(xk, tk, 1, 0)
        s_chain[j] = s
        logU[j] = logU[j - 1] - np.log1p(eps * (wt + wx * s))
    return s_chain, logU


def slope_s_eps_n(sys, x, theta, n):
    """s_eps_n at the base points (terminal seed 0, backward Xi^- fold)."""
    if n == 0:
        return np.zeros(np.broadcast(np.asarray(x), np.asarray(theta)).shape)
    xs, ts = sys.orbit(x, theta, n)
    s_chain, _ = backward_fold(sys, xs, ts)
    return s_chain[n]


@dataclass
class SStarResult:
    value: np.ndarray
    n: int
    sigma_hat: float
    tail_bound: float


def slope_s_star(sys, x, theta, tol=1e-12):
    """Invariant slope s_eps_* with certified truncation.

    The order n is grown until the measured last increment divided by
    (1 - sigma_hat) is below tol; sigma_hat is the certified contraction
    factor of Xi^- in its slope argument.
    """
    sig = sigma_hat(sys)
    ft = sys.f_pert.sup_bound(0, 1)
    if ft == 0.0:
        shape = np.broadcast(np.asarray(x), np.asarray(theta)).shape
        return SStarResult(np.zeros(shape), 1, sig, 0.0)
    first = ft / sys.lam
    n = max(2, int(math.ceil(math.log(tol * (1.0 - sig) / first) / math.log(sig))) + 1)
    for _ in range(8):
        xs, ts = sys.orbit(x, theta, n)
        s_n = backward_fold(sys, xs, ts)[0][n]
        s_prev = backward_fold(sys, xs[:n], ts[:n])[0][n - 1]
        inc = float(np.max(np.abs(s_n - s_prev)))
        tail = inc / (1.0 - sig)
        if tail < tol:
            return SStarResult(s_n, n, sig, tail)
        n *= 2
    raise ContractionNotCertified("slope_s_star tail bound did not reach tol")


def s_star_along_orbit(sys, xs, ts, tol=1e-12):
    """s_eps_* at every point of a stored orbit, via one sliding backward fold.

    The last `n_tail` orbit points serve only as fold tail; values are
    returned for indices 0..(len-1-n_tail).
    """
    sig = sigma_hat(sys)
    ft = sys.f_pert.sup_bound(0, 1)
    if ft == 0.0:
        return np.zeros_like(xs), 0
    first = ft / sys.lam
    n_tail = max(2, int(math.ceil(math.log(tol * (1.0 - sig) / first) / math.log(sig))) + 1)
    n = xs.shape[0] - 1
    if n < n_tail:
        raise ValueError("orbit shorter than the fold tail")
    eps = sys.epsilon
    s = np.zeros_like(xs[0])
    out = np.zeros_like(xs)
    for k in range(n - 1, -1, -1):
        s = xi_minus(sys, xs[k], ts[k], s)
        out[k] = s
    del eps
    return out[: n - n_tail + 1], n_tail


def upsilon_along_orbit(sys, xs, ts, tol=1e-12):
    """One-step centre expansion upsilon = 1 + eps*(wt + wx*s_eps_*) along an orbit.

    Returns (values, n_tail); values cover orbit indices 0..len-1-n_tail.
    """
    s_vals, n_tail = s_star_along_orbit(sys, xs, ts, tol)
    m = s_vals.shape[0]
    wt = sys.omega.deriv_eval(xs[:m], ts[:m], 0, 1)
    wx = sys.omega.deriv_eval(xs[:m], ts[:m], 1, 0)
    return 1.0 + sys.epsilon * (wt + wx * s_vals), n_tail


# -- regularized psi ------------------------------------------------------------


@dataclass
class PsiField:
    """Regularized centre derivative psi = psi_{n0} with grid-certified proxy bound."""

    n0: int
    rho_reg: float
    proxy_sup: float
    _sys: object

    def __call__(self, x, theta):
        wt = self._sys.omega.deriv_eval(x, theta, 0, 1)
        wx = self._sys.omega.deriv_eval(x, theta, 1, 0)
        return wt + wx * slope_s_n(self._sys, x, theta, self.n0)


def build_psi_field(sys, rho_reg=0.1, grid=128, n_max=60):
    """Pick the smallest n0 with grid sup |psi_{n0} - psi_{n0+5}| < rho_reg/2."""
    if not 0.0 < rho_reg < 0.25:
        raise ValueError("rho_reg must lie in (0, 1/4)")
    u = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(u, u, indexing="ij")
    wx = sys.omega.deriv_eval(X, T, 1, 0)
    for n0 in range(1, n_max):
        d = np.max(np.abs(wx * (slope_s_n(sys, X, T, n0) - slope_s_n(sys, X, T, n0 + 5))))
        if d < rho_reg / 2.0:
            return PsiField(n0=n0, rho_reg=rho_reg, proxy_sup=float(d), _sys=sys)
    raise ContractionNotCertified("no n0 satisfied the psi regularization proxy")


# -- expansion factors ----------------------------------------------------------


@dataclass
class ExpansionFactors:
    """Slope/expansion data along one orbit segment.

    Index conventions: w_eps[k] = w_eps_k(p_0) and log_Gamma[k] = log Gamma_k(p_0)
    grow forward from the base point; s_eps[k] = s_eps_k(p_{n-k}) and
    log_Upsilon[k] = log Upsilon_k(p_{n-k}) are the backward-fold chains, so
    entry [n] of each is the order-n value at the base point.  zeta[k] =
    zeta_k(p_0) uses the regularized psi.
    """

    x0: np.ndarray
    theta0: np.ndarray
    n: int
    s_eps: np.ndarray
    w_eps: np.ndarray
    log_Gamma: np.ndarray
    log_Upsilon: np.ndarray
    zeta: np.ndarray


def factors_from_orbit(sys, xs, ts, psi_field=None):
    """ExpansionFactors evaluated on a stored orbit p_0..p_n."""
    n = xs.shape[0] - 1
    eps = sys.epsilon
    s_chain, logU = backward_fold(sys, xs, ts)
    w = np.zeros_like(xs)
    logG = np.zeros_like(xs)
    zeta = np.zeros_like(xs)
    psi_vals = psi_field(xs, ts) if psi_field is not None else None
    for k in range(n):
        xk, tk = xs[k], ts[k]
        fx = sys.fibre_degree + sys.f_pert.deriv_eval(xk, tk, 1, 0)
        ft = sys.f_pert.deriv_eval(xk, tk, 0, 1)
        logG[k + 1] = logG[k] + np.log(fx) + np.log1p(eps * (ft / fx) * w[k])
        w[k + 1] = xi_plus(sys, xk, tk, w[k])
        if psi_vals is not None:
            zeta[k + 1] = zeta[k] + eps * psi_vals[k]
    return ExpansionFactors(
        x0=xs[0], theta0=ts[0], n=n, s_eps=s_chain, w_eps=w,
        log_Gamma=logG, log_Upsilon=logU, zeta=zeta,
    )


def expansion_factors(sys, x, theta, n, psi_field=None):
    """ExpansionFactors along the forward orbit of (x, theta)."""
    if n < 1:
        raise ValueError("n >= 1 required")
    xs, ts = sys.orbit(x, theta, n)
    return factors_from_orbit(sys, xs, ts, psi_field=psi_field)


def centre_expansion_bounds(sys, x, theta, n, T, tol=1e-12, lam_c=None):
    """Band check for the centre expansion product prod_k upsilon(p_k), k < n.

    Asserts exp(-Lambda_c*k*eps) <= prod <= exp(Lambda_c*k*eps) for all
    k <= n (BandViolated otherwise) and reports the pointwise deviation of
    log upsilon from log(1 + eps*psi_*), whose size is O(eps^2 log eps^-1).
    """
    if n * sys.epsilon > T + 1e-12:
        raise ValueError("n exceeds T/epsilon")
    if lam_c is None:
        lam_c = lambda_c(sys)
    sig = sigma_hat(sys)
    ft = sys.f_pert.sup_bound(0, 1)
    n_tail = 2
    if ft > 0:
        n_tail = max(
            2, int(math.ceil(math.log(tol * (1.0 - sig) * sys.lam / ft) / math.log(sig))) + 1
        )
    xs, ts = sys.orbit(x, theta, n + n_tail)
    ups, _ = upsilon_along_orbit(sys, xs, ts, tol)
    ups = ups[: n + 1]
    log_prod = np.concatenate([np.zeros((1,) + ups.shape[1:]), np.cumsum(np.log(ups[:n]), axis=0)])
    ks = np.arange(n + 1).reshape((-1,) + (1,) * (log_prod.ndim - 1))
    band = lam_c * ks * sys.epsilon
    slack = 1e-12 + 0.0 * band
    if np.any(log_prod > band + slack) or np.any(log_prod < -band - slack):
        raise BandViolated("centre expansion product left the Lambda_c band")
    ps = psi_star(sys, xs[: n + 1], ts[: n + 1], tol)
    dev = np.abs(np.log(ups) - np.log1p(sys.epsilon * ps))
    max_dev = float(np.max(dev))
    eps = sys.epsilon
    scale = eps * eps * math.log(1.0 / eps) if eps > 0 else 1.0
    return {
        "n": n,
        "lambda_c": lam_c,
        "log_prod": log_prod,
        "max_deviation": max_dev,
        "K_fitted": max_dev / scale if scale > 0 else 0.0,
    }


# -- appendix identities ---------------------------------------------------------


def _chain_factors(sys, xs, ts):
    """Forward/backward chains on a stored backward orbit (reversed to forward order)."""
    fx = xs[::-1].copy()
    ft = ts[::-1].copy()
    return factors_from_orbit(sys, fx, ft)


def inverse_jacobian_formula(sys, x1, theta1, itinerary):
    """d_q F_eps^{-n} assembled from (Gamma_n, Upsilon_n, s_eps_n, w_eps_n).

    The backward orbit p = F^{-n}(q) is specified by the branch itinerary.
    Returns (matrix, factors, orbit) where orbit is in forward order p_0..p_n.
    """
    xs_b, ts_b = sys.backward_orbit(x1, theta1, itinerary)
    fac = _chain_factors(sys, xs_b, ts_b)
    n = fac.n
    eps = sys.epsilon
    s = fac.s_eps[n]
    w = fac.w_eps[n]
    U = np.exp(fac.log_Upsilon[n])
    Ginv = np.exp(-fac.log_Gamma[n])
    shape = np.shape(s)
    Mx = np.empty(shape + (2, 2))
    Mx[..., 0, 0] = Ginv - eps * w * U * s
    Mx[..., 0, 1] = U * s
    Mx[..., 1, 0] = -eps * w * U
    Mx[..., 1, 1] = U
    return Mx, fac, (xs_b[::-1], ts_b[::-1])


def direct_inverse_jacobian(sys, xs, ts):
    """Inverse of the chain-rule product of one-step Jacobians along a stored orbit."""
    n = xs.shape[0] - 1
    J = None
    for k in range(n):
        Jk = sys.jacobian(xs[k], ts[k])
        J = Jk if J is None else Jk @ J
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    inv[..., 1, 1] = J[..., 0, 0]
    return inv / det[..., None, None]


def log_jacobian_identity(sys, x1, theta1, itinerary):
    """Residual |log det d_qF^{-n} - (log Upsilon_n - log Gamma_n)|."""
    Mx, fac, orbit = inverse_jacobian_formula(sys, x1, theta1, itinerary)
    det = Mx[..., 0, 0] * Mx[..., 1, 1] - Mx[..., 0, 1] * Mx[..., 1, 0]
    n = fac.n
    resid = np.abs(np.log(det) - (fac.log_Upsilon[n] - fac.log_Gamma[n]))
    return float(np.max(resid)) if np.ndim(resid) else float(resid)


# -- Hessian chain-rule bound ------------------------------------------------------


def _opnorm2(Mx):
    """Spectral norm of 2x2 matrices (vectorized)."""
    Mx = np.asarray(Mx, dtype=float)
    a = Mx[..., 0, 0]
    b = Mx[..., 0, 1]
    c = Mx[..., 1, 0]
    d = Mx[..., 1, 1]
    q = a * a + b * b + c * c + d * d
    det = a * d - b * c
    disc = np.sqrt(np.maximum(q * q - 4.0 * det * det, 0.0))
    return np.sqrt(np.maximum((q + disc) / 2.0, 0.0))


def hessian_chain_bound_check(f1, f2, g, x, theta):
    """Verify ||H(g o f)|| <= ||Hg||*||df||^2 + k*||dg||*||Hf|| with exact jets.

    f = (f1, f2) maps the torus to itself (k = 2); all three functions are
    trig polynomials.  Returns (holds, lhs, rhs) with vectorized pointwise
    evaluation.
    """
    j1 = f1.jet(x, theta, 2)
    j2 = f2.jet(x, theta, 2)
    fx1, ft1 = j1[(1, 0)], j1[(0, 1)]
    fx2, ft2 = j2[(1, 0)], j2[(0, 1)]
    u, v = j1[(0, 0)], j2[(0, 0)]
    jg = g.jet(u, v, 2)
    gu, gv = jg[(1, 0)], jg[(0, 1)]
    guu, guv, gvv = jg[(2, 0)], jg[(1, 1)], jg[(0, 2)]

    shape = np.shape(u)
    df = np.empty(shape + (2, 2))
    df[..., 0, 0], df[..., 0, 1] = fx1, ft1
    df[..., 1, 0], df[..., 1, 1] = fx2, ft2
    Hg = np.empty(shape + (2, 2))
    Hg[..., 0, 0], Hg[..., 0, 1] = guu, guv
    Hg[..., 1, 0], Hg[..., 1, 1] = guv, gvv
    H1 = np.empty(shape + (2, 2))
    H1[..., 0, 0], H1[..., 0, 1] = j1[(2, 0)], j1[(1, 1)]
    H1[..., 1, 0], H1[..., 1, 1] = j1[(1, 1)], j1[(0, 2)]
    H2 = np.empty(shape + (2, 2))
    H2[..., 0, 0], H2[..., 0, 1] = j2[(2, 0)], j2[(1, 1)]
    H2[..., 1, 0], H2[..., 1, 1] = j2[(1, 1)], j2[(0, 2)]

    # H(g o f) = df^T Hg df + gu*H1 + gv*H2 (exact)
    dft = np.swapaxes(df, -1, -2)
    H = dft @ Hg @ df + gu[..., None, None] * H1 + gv[..., None, None] * H2
    lhs = _opnorm2(H)
    dg_norm = np.hypot(gu, gv)
    rhs = _opnorm2(Hg) * _opnorm2(df) ** 2 + 2.0 * dg_norm * np.maximum(
        _opnorm2(H1), _opnorm2(H2)
    )
    return lhs <= rhs + 1e-10, lhs, rhs
