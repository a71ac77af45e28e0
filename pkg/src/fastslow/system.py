"""Fast-slow systems on the 2-torus.

The map is

    F_eps(x, theta) = ( f(x, theta) mod 1,  theta + eps*omega(x, theta) mod 1 )

with f(x, theta) = d*x + f_pert(x, theta) for an integer fibre degree d and
trigonometric polynomials f_pert, omega.  The fibre maps x -> f(x, theta) are
uniformly expanding with a certified lower bound lam = d - sup|df_pert/dx| > 3.

All evaluations are vectorized over numpy arrays of points.  Angle
differences are always taken with the nearest-lift convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EpsilonTooLarge, NoConvergence, NotExpanding, ValidationError
from .trig import TrigPoly2

NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 100


def wrap(u):
    """Reduce coordinates mod 1 into [0, 1)."""
    return np.asarray(u, dtype=float) % 1.0


def circle_diff(a, b):
    """Nearest-lift difference a - b, in [-1/2, 1/2)."""
    return (np.asarray(a, dtype=float) - np.asarray(b, dtype=float) + 0.5) % 1.0 - 0.5


def circle_dist(a, b):
    return np.abs(circle_diff(a, b))


@dataclass(frozen=True)
class ConeParams:
    """Cone-field parameters: centre cone |v1| <= chi_c |v2|, unstable cone |v2| <= eps*chi_u |v1|."""

    M: float
    lam: float
    chi_c: float
    chi_u: float


class FastSlowSystem:
    """The map F_eps with exact jets to order 3.

    Parameters
    ----------
    fibre_degree : int
        Integer degree d >= 4 of the fibre maps.
    f_pert : TrigPoly2
        Perturbation of the linear fibre part; f(x,theta) = d*x + f_pert(x,theta).
    omega : TrigPoly2
        Slow forcing.
    epsilon : float
        Time-scale separation parameter, > 0 (eps = 0 is accepted and gives F_0).
    """

    def __init__(self, fibre_degree, f_pert, omega, epsilon, check_diffeo=True):
        if int(fibre_degree) != fibre_degree or fibre_degree < 4:
            raise ValidationError("fibre_degree must be an integer >= 4")
        if epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        self.fibre_degree = int(fibre_degree)
        self.f_pert = f_pert
        self.omega = omega
        self.epsilon = float(epsilon)
        self.lam = self.fibre_degree - f_pert.sup_bound(1, 0)
        if self.lam <= 3.0:
            raise NotExpanding(
                f"certified expansion d - sup|dx f_pert| = {self.lam:.6g} <= 3"
            )
        if check_diffeo and self.epsilon > 0 and self.det_lower_bound() <= 0.0:
            raise ValidationError(
                "det dF_eps not certified positive; epsilon too large for this system"
            )

    # -- basic evaluations -------------------------------------------------

    def f_lift(self, x, theta):
        """Lifted fibre map value d*x + f_pert(x, theta)."""
        return self.fibre_degree * np.asarray(x, dtype=float) + self.f_pert(x, theta)

    def omega_val(self, x, theta):
        return self.omega(x, theta)

    def f_jet(self, x, theta, order=1):
        """Partials of f up to `order`; the linear part contributes d to (1,0)."""
        jet = self.f_pert.jet(x, theta, order)
        jet[(1, 0)] = jet[(1, 0)] + self.fibre_degree
        return jet

    def eval_with_jet(self, x, theta, order):
        """Jets of (f, omega) at (x, theta) up to total order <= 3.

        Returns a pair of dicts keyed by (dx, dtheta); entry (0, 0) is the
        function value (f as a lift).
        """
        fj = self.f_jet(x, theta, order)
        fj[(0, 0)] = self.f_lift(x, theta)
        wj = self.omega.jet(x, theta, order)
        return fj, wj

    # -- dynamics ----------------------------------------------------------

    def step(self, x, theta):
        """One application of F_eps; returns coordinates mod 1."""
        x1 = wrap(self.f_lift(x, theta))
        t1 = wrap(np.asarray(theta, dtype=float) + self.epsilon * self.omega(x, theta))
        return x1, t1

    def orbit(self, x0, theta0, n):
        """Orbit segment of length n+1; arrays of shape (n+1,) + shape(x0)."""
        x = wrap(x0)
        t = wrap(theta0)
        xs = np.empty((n + 1,) + x.shape)
        ts = np.empty((n + 1,) + x.shape)
        xs[0], ts[0] = x, t
        for k in range(n):
            x, t = self.step(x, t)
            xs[k + 1], ts[k + 1] = x, t
        return xs, ts

    def jacobian(self, x, theta):
        """dF_eps as an array of shape broadcast(x,theta).shape + (2, 2)."""
        fx = self.fibre_degree + self.f_pert.deriv_eval(x, theta, 1, 0)
        ft = self.f_pert.deriv_eval(x, theta, 0, 1)
        wx = self.omega.deriv_eval(x, theta, 1, 0)
        wt = self.omega.deriv_eval(x, theta, 0, 1)
        shape = np.broadcast(np.asarray(x), np.asarray(theta)).shape
        J = np.empty(shape + (2, 2))
        J[..., 0, 0] = fx
        J[..., 0, 1] = ft
        J[..., 1, 0] = self.epsilon * wx
        J[..., 1, 1] = 1.0 + self.epsilon * wt
        return J

    def jacobian_product(self, x, theta, n):
        """d F_eps^n accumulated along the orbit (last-times-first order)."""
        if n < 1:
            raise ValueError("n >= 1 required for Jacobian products")
        x = wrap(x)
        t = wrap(theta)
        J = self.jacobian(x, t)
        for _ in range(n - 1):
            x, t = self.step(x, t)
            J = self.jacobian(x, t) @ J
        return J

    # -- certified norms and cones ------------------------------------------

    def norm(self, which, dx, dt):
        """Certified sup-norm bound of a partial of f or omega."""
        if which == "f":
            if (dx, dt) == (1, 0):
                return self.fibre_degree + self.f_pert.sup_bound(1, 0)
            return self.f_pert.sup_bound(dx, dt)
        return self.omega.sup_bound(dx, dt)

    @property
    def M(self):
        """M = max{||dx omega||, ||dtheta omega||, ||dtheta f||}."""
        return max(
            self.omega.sup_bound(1, 0),
            self.omega.sup_bound(0, 1),
            self.f_pert.sup_bound(0, 1),
        )

    def det_lower_bound(self, grid=512):
        """Certified lower bound of det dF_eps via a grid plus a Lipschitz margin."""
        u = (np.arange(grid) + 0.5) / grid
        X, T = np.meshgrid(u, u, indexing="ij")
        J = self.jacobian(X, T)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        eps = self.epsilon
        s = self.f_pert.sup_bound
        w = self.omega.sup_bound
        fx = self.fibre_degree + s(1, 0)
        # |grad det| <= |grad fx|(1+eps wt) + fx*eps|grad wt| + eps(|grad ft| wx + ft |grad wx|)
        lip = (
            (s(2, 0) + s(1, 1)) * (1 + eps * w(0, 1))
            + fx * eps * (w(1, 1) + w(0, 2))
            + eps * ((s(1, 1) + s(0, 2)) * w(1, 0) + s(0, 1) * (w(2, 0) + w(1, 1)))
        )
        return float(det.min() - lip * math.sqrt(2.0) / (2.0 * grid))

    def cone_params(self):
        """Cone parameters per the invariance conditions; raises EpsilonTooLarge."""
        M = self.M
        lam = self.lam
        if self.epsilon > (lam - 2.0) / (M * (M + 1.0)):
            raise EpsilonTooLarge(
                f"epsilon={self.epsilon:.4g} > (lam-2)/(M(M+1)) = "
                f"{(lam - 2.0) / (M * (M + 1.0)):.4g}"
            )
        c1bar = 2.0 * max(self.omega.sup_bound(1, 0), self.omega.sup_bound(0, 1))
        chi_u = max((M + 1.0) / (lam - 2.0), c1bar)
        if self.epsilon > 0 and chi_u > 1.0 / (self.epsilon * M):
            raise EpsilonTooLarge(
                f"chi_u={chi_u:.4g} exceeds (eps*M)^-1={1.0 / (self.epsilon * M):.4g}"
            )
        return ConeParams(M=M, lam=lam, chi_c=M, chi_u=chi_u)

    def cone_check(self, x, theta, v, which):
        """Membership of v=(v1,v2) in the unstable or centre cone (pointwise)."""
        del x, theta  # cones are constant fields
        cp = self.cone_params()
        v = np.asarray(v, dtype=float)
        v1, v2 = v[..., 0], v[..., 1]
        if which == "unstable":
            return np.abs(v2) <= self.epsilon * cp.chi_u * np.abs(v1)
        if which == "centre":
            return np.abs(v1) <= cp.chi_c * np.abs(v2)
        raise ValueError("which must be 'unstable' or 'centre'")

    def expansion_check(self, x, theta, v):
        """|pi_1 dF_eps v| / |pi_1 v|; must exceed 3 for unstable-cone vectors."""
        J = self.jacobian(x, theta)
        v = np.asarray(v, dtype=float)
        num = np.abs(J[..., 0, 0] * v[..., 0] + J[..., 0, 1] * v[..., 1])
        ratio = num / np.abs(v[..., 0])
        in_cone = self.cone_check(x, theta, v, "unstable")
        if np.any(in_cone & (ratio <= 3.0)):
            raise NotExpanding("unstable-cone vector expanded by a factor <= 3")
        return ratio

    # -- inverse branches ----------------------------------------------------

    def fibre_inverse_branch(self, branch, x_target, theta):
        """Preimage of x_target under x -> f(x, theta) on the given monotone lap.

        Laps are the circle arcs between consecutive integer crossings of the
        lift, ordered by the crossing index: the branch-b preimage solves
        f(y, theta) = x_target + ceil(f(0, theta)) + b on the lift.  Each
        branch map is then a continuous contraction of the circle (arcs may
        straddle the x = 0 seam).  Vectorized; safeguarded Newton with
        bisection fallback, residual < 1e-13.
        """
        d = self.fibre_degree
        branch = np.asarray(branch)
        if np.any((branch < 0) | (branch >= d)):
            raise ValueError("branch index out of range")
        t = wrap(x_target)
        theta = np.asarray(theta, dtype=float)
        F0 = self.f_pert(0.0, theta)  # lift value at y=0
        target = t + np.ceil(F0) + branch
        # the preimage lies in [0, 2) on the lift (arcs may overhang past 1)
        lo = np.zeros(np.broadcast(np.asarray(target), theta).shape)
        hi = np.full_like(lo, 2.0)
        y = np.clip((target - F0) / d, 0.0, 2.0)
        for _ in range(NEWTON_MAX_ITER):
            r = self.f_lift(y, theta) - target
            if np.all(np.abs(r) < NEWTON_TOL):
                return wrap(y)
            pos = r > 0
            hi = np.where(pos, np.minimum(hi, y), hi)
            lo = np.where(~pos, np.maximum(lo, y), lo)
            fy = d + self.f_pert.deriv_eval(y, theta, 1, 0)
            y_new = y - r / fy
            bad = (y_new <= lo) | (y_new >= hi)
            y = np.where(bad, 0.5 * (lo + hi), y_new)
        raise NoConvergence("fibre inverse branch Newton did not converge")

    def inverse_step(self, x1, theta1, branch):
        """Preimage (x, theta) of (x1, theta1) under F_eps on the given fibre branch.

        Solves theta + eps*omega(x(theta), theta) = theta1 by a scalar Newton
        iteration in theta (well conditioned: the derivative is 1 + O(eps)).
        """
        x1 = np.asarray(x1, dtype=float)
        t1 = np.asarray(theta1, dtype=float)
        theta = t1.copy() if t1.ndim else np.array(t1, dtype=float)
        eps = self.epsilon
        x = self.fibre_inverse_branch(branch, x1, theta)
        for _ in range(NEWTON_MAX_ITER):
            r = theta + eps * self.omega(x, theta) - t1
            if np.all(np.abs(r) < NEWTON_TOL):
                return wrap(x), wrap(theta)
            fx = self.fibre_degree + self.f_pert.deriv_eval(x, theta, 1, 0)
            ft = self.f_pert.deriv_eval(x, theta, 0, 1)
            wx = self.omega.deriv_eval(x, theta, 1, 0)
            wt = self.omega.deriv_eval(x, theta, 0, 1)
            drdt = 1.0 + eps * (wt - wx * ft / fx)
            theta = theta - r / drdt
            x = self.fibre_inverse_branch(branch, x1, theta)
        raise NoConvergence("inverse_step Newton did not converge")

    def backward_orbit(self, x, theta, itinerary):
        """Backward orbit q = p_n, p_{n-1}, ..., p_0 for a branch itinerary.

        itinerary may be a sequence of branch indices or an ASCII digit
        string; itinerary[k] selects the branch of the k-th backward step.
        Returns arrays xs, ts with xs[0] = x (the ordering is backward in time).
        """
        if isinstance(itinerary, str):
            itinerary = [int(c) for c in itinerary]
        xs = [np.asarray(wrap(x), dtype=float)]
        ts = [np.asarray(wrap(theta), dtype=float)]
        for b in itinerary:
            xb, tb = self.inverse_step(xs[-1], ts[-1], b)
            xs.append(xb)
            ts.append(tb)
        return np.array(xs), np.array(ts)


# -- TOML system files -------------------------------------------------------


def _terms_to_rows(poly):
    return [[k, l, ac, asn] for (k, l), (ac, asn) in sorted(poly.terms.items())]


def system_to_toml(sys):
    """Serialize to the TOML system-definition format (bit-exact round trip)."""
    lines = [
        f"fibre_degree = {sys.fibre_degree}",
        f"epsilon = {sys.epsilon!r}",
        "",
        "[f_pert]",
        "terms = [",
    ]
    for k, l, ac, asn in _terms_to_rows(sys.f_pert):
        lines.append(f"    [{k}, {l}, {ac!r}, {asn!r}],")
    lines += ["]", "", "[omega]", "terms = ["]
    for k, l, ac, asn in _terms_to_rows(sys.omega):
        lines.append(f"    [{k}, {l}, {ac!r}, {asn!r}],")
    lines.append("]")
    return "\n".join(lines) + "\n"


def _rows_to_poly(rows, where):
    terms = {}
    for row in rows:
        if len(row) != 4:
            raise ValidationError(f"{where}: term rows must be [k, l, a_cos, a_sin]")
        k, l, ac, asn = row
        terms[(int(k), int(l))] = (float(ac), float(asn))
    return TrigPoly2(terms)


def system_from_toml(text, check_diffeo=True):
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"malformed TOML system file: {exc}") from exc
    required = {"fibre_degree", "epsilon", "f_pert", "omega"}
    unknown = set(data) - required
    if unknown:
        raise ValidationError(f"unknown keys in system file: {sorted(unknown)}")
    missing = required - set(data)
    if missing:
        raise ValidationError(f"missing keys in system file: {sorted(missing)}")
    f_pert = _rows_to_poly(data["f_pert"].get("terms", []), "f_pert")
    omega = _rows_to_poly(data["omega"].get("terms", []), "omega")
    return FastSlowSystem(
        data["fibre_degree"], f_pert, omega, data["epsilon"], check_diffeo=check_diffeo
    )


def save_system(sys, path):
    with open(path, "w") as fh:
        fh.write(system_to_toml(sys))


def load_system(path, check_diffeo=True):
    with open(path) as fh:
        return system_from_toml(fh.read(), check_diffeo=check_diffeo)
