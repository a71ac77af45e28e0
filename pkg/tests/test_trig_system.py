import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fastslow.errors import EpsilonTooLarge, ValidationError
from fastslow.reference import sys_a, sys_b
from fastslow.system import FastSlowSystem, system_from_toml, system_to_toml, wrap
from fastslow.trig import TrigPoly2


def test_jet_closed_forms_sys_a(A):
    fj, wj = A.eval_with_jet(0.1, 0.2, 1)
    assert fj[(1, 0)] == 4.0
    assert fj[(0, 1)] == 0.0
    assert wj[(1, 0)] == 0.0
    assert wj[(0, 1)] == pytest.approx(2 * np.pi * np.cos(0.4 * np.pi), abs=1e-12)
    fj2, _ = A.eval_with_jet(0.37, 0.81, 2)
    assert fj2[(2, 0)] == fj2[(1, 1)] == fj2[(0, 2)] == 0.0


def test_jets_match_finite_differences(B, rng):
    pts = rng.random((40, 2))
    # step 1e-5 at first order per the exactness contract; larger steps for
    # higher orders where second-difference roundoff dominates
    for dx, dt, h, tol in [(1, 0, 1e-5, 1e-6), (0, 1, 1e-5, 1e-6),
                           (2, 0, 1e-4, 1e-4), (1, 1, 1e-4, 1e-4),
                           (0, 2, 1e-4, 1e-4)]:
        for poly in (B.f_pert, B.omega):
            got = poly.deriv_eval(pts[:, 0], pts[:, 1], dx, dt)
            ref = oracles.fd_partial(lambda x, t: poly(x, t), pts[:, 0], pts[:, 1],
                                     dx, dt, h=h)
            assert np.max(np.abs(got - ref)) < tol


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1, width=32), st.floats(0, 1, width=32),
       st.integers(0, 3), st.integers(0, 3))
def test_jet_hypothesis_fd(x, t, dx, dt):
    if dx + dt == 0 or dx + dt > 3:
        return
    poly = TrigPoly2({(1, 1): (0.3, 0.1), (2, 0): (0.0, 0.05), (0, 1): (0.2, 0.4)})
    got = poly.deriv_eval(x, t, dx, dt)
    h = 1e-4 if dx + dt == 3 else 1e-5
    ref = oracles.fd_partial(poly, x, t, dx, dt, h=h)
    assert abs(got - ref) < 1e-4 * max(1.0, poly.sup_bound(dx, dt))


def test_sup_bound_certified(B, rng):
    pts = rng.random((4000, 2))
    for dx, dt in [(0, 0), (1, 0), (0, 1), (2, 0), (3, 0)]:
        vals = B.omega.deriv_eval(pts[:, 0], pts[:, 1], dx, dt)
        assert np.max(np.abs(vals)) <= B.omega.sup_bound(dx, dt) + 1e-12


def test_step_closed_forms(A):
    assert A.step(0.1, 0.5) == (pytest.approx(0.4, abs=1e-15), pytest.approx(0.5, abs=1e-15))
    x1, t1 = A.step(0.1, 0.25)
    assert x1 == pytest.approx(0.4, abs=1e-15)
    assert t1 == pytest.approx(0.26, abs=1e-15)


def test_orbit_matches_extended_precision(B, rng):
    x0, t0 = rng.random(), rng.random()
    xs, ts = B.orbit(x0, t0, 1000)
    ref = oracles.mp_orbit(B, x0, t0, 1000)
    # compare where the double orbit has not yet decorrelated (lam^n growth);
    # 4^n * 1e-16 < 1e-9 holds for n <= 11, so check a shadowing window
    for n in (1, 5, 10):
        dx = abs(float(((xs[n] - ref[n, 0] + 0.5) % 1.0) - 0.5))
        dt = abs(float(((ts[n] - ref[n, 1] + 0.5) % 1.0) - 0.5))
        assert max(dx, dt) < 1e-9


def test_jacobian_closed_form_sys_a(A, rng):
    t = rng.random(5)
    J = A.jacobian(rng.random(5), t)
    assert np.allclose(J[:, 0, 0], 4.0)
    assert np.allclose(J[:, 0, 1], 0.0)
    assert np.allclose(J[:, 1, 0], 0.0)
    assert np.allclose(J[:, 1, 1], 1 + 0.02 * np.pi * np.cos(2 * np.pi * t))


def test_jacobian_product_n1_is_jacobian(B):
    assert np.allclose(B.jacobian_product(0.3, 0.7, 1), B.jacobian(0.3, 0.7))


def test_jacobian_product_vs_finite_difference(B):
    n = 10
    p = np.array([0.3, 0.7])
    J = B.jacobian_product(p[0], p[1], n)
    h = 2e-8

    def Fn(q):
        xs, ts = q[0], q[1]
        for _ in range(n):
            xs_new = B.fibre_degree * xs + B.f_pert(xs % 1, ts % 1)
            ts = ts + B.epsilon * B.omega(xs % 1, ts % 1)
            xs = xs_new
        return np.array([xs, ts])

    for j, e in enumerate(np.eye(2)):
        col = (Fn(p + h * e) - Fn(p - h * e)) / (2 * h)
        assert np.max(np.abs(col - J[:, j]) / np.maximum(np.abs(J[:, j]), 1)) < 1e-6


def test_cone_params_sys_a(A):
    cp = A.cone_params()
    assert cp.M == pytest.approx(2 * np.pi)
    assert cp.lam == 4.0
    assert cp.chi_c == pytest.approx(2 * np.pi)
    assert cp.chi_u == pytest.approx(max((2 * np.pi + 1) / 2.0, 4 * np.pi))


def test_epsilon_too_large():
    with pytest.raises(EpsilonTooLarge):
        sys_a(1.0).cone_params()


def test_cone_membership_basics(A):
    assert A.cone_check(0.1, 0.2, np.array([1.0, 0.0]), "unstable")
    assert A.cone_check(0.1, 0.2, np.array([0.0, 1.0]), "centre")


def test_cone_invariance_sweep(B, rng):
    cp = B.cone_params()
    n = 10_000
    x, t = rng.random(n), rng.random(n)
    u = rng.uniform(-1, 1, n) * cp.chi_u
    v = np.stack([np.ones(n), B.epsilon * u], axis=-1)
    J = B.jacobian(x, t)
    img = np.einsum("nij,nj->ni", J, v)
    assert np.all(np.abs(img[:, 1]) <= B.epsilon * cp.chi_u * np.abs(img[:, 0]) * (1 + 1e-12))
    ratios = B.expansion_check(x, t, v)
    assert np.min(ratios) > 3.0
    # centre cone: backward invariance of [dF]^{-1}
    s = rng.uniform(-1, 1, n) * cp.chi_c
    vc = np.stack([s, np.ones(n)], axis=-1)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0], inv[:, 0, 1] = J[:, 1, 1], -J[:, 0, 1]
    inv[:, 1, 0], inv[:, 1, 1] = -J[:, 1, 0], J[:, 0, 0]
    pre = np.einsum("nij,nj->ni", inv / det[:, None, None], vc)
    assert np.all(np.abs(pre[:, 0]) <= cp.chi_c * np.abs(pre[:, 1]) * (1 + 1e-12))


def test_determinant_positive_on_grid(A, B):
    assert A.det_lower_bound() > 0
    assert B.det_lower_bound() > 0


def test_inverse_branch_linear_map(A):
    for k in range(4):
        assert A.fibre_inverse_branch(k, 0.2, 0.3) == pytest.approx((0.2 + k) / 4)


def test_inverse_branch_round_trip(A, B, rng):
    x, t = rng.random(10_000), rng.random(10_000)
    for sysm in (A, B):
        for b in range(sysm.fibre_degree):
            y = sysm.fibre_inverse_branch(b, x, t)
            err = np.abs(((sysm.f_lift(y, t) - x + 0.5) % 1.0) - 0.5)
            assert err.max() < 1e-12


def test_inverse_branches_match_grid_scan(B):
    got = np.sort([float(B.fibre_inverse_branch(b, 0.3, 0.1)) for b in range(4)])
    ref = oracles.grid_preimages(B, 0.3, 0.1)
    assert len(ref) == 4
    assert np.max(np.abs(got - ref)) < 1e-5


def test_inverse_step_round_trip(B, rng):
    x1, t1 = rng.random(50), rng.random(50)
    for b in range(4):
        x0, t0 = B.inverse_step(x1, t1, b)
        xf, tf = B.step(x0, t0)
        assert np.max(np.abs(((xf - x1 + 0.5) % 1) - 0.5)) < 1e-11
        assert np.max(np.abs(((tf - t1 + 0.5) % 1) - 0.5)) < 1e-11


def test_toml_round_trip_bit_exact(B, tmp_path):
    text = system_to_toml(B)
    B2 = system_from_toml(text)
    assert B2.f_pert == B.f_pert and B2.omega == B.omega
    assert B2.epsilon == B.epsilon and B2.fibre_degree == B.fibre_degree
    assert system_to_toml(B2) == text  # serialize(parse(serialize)) is identity


def test_toml_validation_errors():
    with pytest.raises(ValidationError):
        system_from_toml("fibre_degree = [not toml")
    with pytest.raises(ValidationError):
        system_from_toml("fibre_degree = 4\nepsilon = 0.01\nbogus = 1\n"
                         "[f_pert]\nterms=[]\n[omega]\nterms=[]\n")


def test_expanding_validation():
    from fastslow.errors import NotExpanding

    with pytest.raises(NotExpanding):
        FastSlowSystem(4, TrigPoly2({(1, 0): (0.0, 0.5)}), TrigPoly2({}), 0.01)


def test_wrap_conventions():
    assert wrap(1.25) == 0.25
    assert wrap(-0.25) == 0.75
