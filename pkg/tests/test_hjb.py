import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from problems import TWO_PI

from nonlocal_pde import (
    ArgumentError,
    ControlProblem,
    ModelError,
    NonlinearProblem,
    argmin_control,
    build_grid,
    classical_hjb_policy,
    hamiltonian,
    solve_equilibrium_hjb,
)
from nonlocal_pde.hjb import ControlBoundaryWarning, time_reverse, verify_hjb_system


def quadratic(weight=1.0, sigma=1.0, bounds=((-2.0, 2.0),), closed=False, **kw):
    return ControlProblem(
        b=lambda s, y, a: a + 0 * y,
        sigma=lambda s, y, a: sigma + 0 * y + 0 * a,
        h=lambda t, s, y, a: weight * a**2 + 0 * t,
        g=kw.pop("g", lambda t, y: 1 - np.cos(y) + 0 * t),
        bounds=list(bounds) if bounds else None,
        resolution=kw.pop("resolution", 65),
        argmin=(lambda t, s, y, p, q: -p / (2 * weight)) if closed else None,
        **kw,
    )


def test_hamiltonian_examples():
    cp = quadratic()
    # 0.5 * q * 1 + p * a + a^2
    assert hamiltonian(cp, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0) == pytest.approx(4.5)
    assert hamiltonian(cp, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
    with pytest.raises(ArgumentError):
        hamiltonian(cp, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0)


def test_hamiltonian_negated_costs():
    cp = quadratic(negate_costs=True)
    assert hamiltonian(cp, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0) == -1.0


def test_grid_argmin_matches_closed_form():
    p = np.linspace(-3, 3, 25)
    got = argmin_control(quadratic(), 0.0, 0.0, 0.0 * p, p, 0.0 * p)
    np.testing.assert_allclose(got, -p / 2, atol=1e-3)
    closed = argmin_control(quadratic(closed=True, bounds=None), 0.0, 0.0, 0.0 * p, p, 0.0 * p)
    np.testing.assert_array_equal(closed, -p / 2)


def test_argmin_tie_picks_first_grid_point():
    cp = ControlProblem(
        b=lambda s, y, a: 0 * a, sigma=lambda s, y, a: 1.0 + 0 * a, h=lambda t, s, y, a: 0 * a,
        g=lambda t, y: 0 * y, bounds=[(-1.0, 1.0)], resolution=5,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert argmin_control(cp, 0.0, 0.0, np.zeros(3), np.zeros(3), np.zeros(3)).tolist() == [-1.0] * 3


def test_boundary_minimiser_warns():
    cp = ControlProblem(
        b=lambda s, y, a: 0 * a, sigma=lambda s, y, a: 1.0 + 0 * a, h=lambda t, s, y, a: -a,
        g=lambda t, y: 0 * y, bounds=[(-1.0, 1.0)],
    )
    with pytest.warns(ControlBoundaryWarning):
        a = argmin_control(cp, 0.0, 0.0, np.zeros(2), np.zeros(2), np.zeros(2))
    assert np.all(a == 1.0)


def test_control_problem_validation():
    with pytest.raises(ArgumentError):
        quadratic(bounds=None)
    with pytest.raises(ArgumentError):
        quadratic(bounds=((1.0, 1.0),))
    with pytest.raises(ArgumentError):
        quadratic(resolution=2)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.1, 10.0), p=st.floats(-3, 3), q=st.floats(-3, 3), y=st.floats(0, 6.28))
def test_argmin_invariant_under_positive_scaling(scale, p, q, y):
    def make(c):
        return ControlProblem(
            b=lambda s, yy, a: c * np.sin(a + yy),
            sigma=lambda s, yy, a: np.sqrt(c) * (1 + 0.5 * np.cos(a)) + 0 * yy,
            h=lambda t, s, yy, a: c * (a - 0.3) ** 2,
            g=lambda t, yy: 0 * yy, bounds=[(-2.0, 2.0)], resolution=41,
        )

    args = (0.0, 0.0, np.array([y]), np.array([p]), np.array([q]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ControlBoundaryWarning)
        a1, a2 = argmin_control(make(1.0), *args), argmin_control(make(scale), *args)
    assert a1 == pytest.approx(a2, abs=1e-9)


def test_time_reverse_is_an_involution():
    def F(t, s, y, u, p, q, l, m, n):
        return np.sin(t) * q + s * u + y * l + p * m - n**2

    def F_t(t, s, y, u, p, q, l, m, n):
        return np.cos(t) * q

    prob = NonlinearProblem(F=F, F_t=F_t, g=lambda t, y: t * np.cos(y), g_t=lambda t, y: np.cos(y))
    T = 1.7
    rev = time_reverse(prob, T)
    back = time_reverse(rev, T)
    rng = np.random.default_rng(0)
    args = rng.standard_normal((9, 20))
    # the reversed data take the terminal values: g'(t', y) = g(T - t', y)
    assert rev.g(0.2, 1.0) == pytest.approx(prob.g(T - 0.2, 1.0))
    assert rev.g_t(0.2, 1.0) == pytest.approx(-prob.g_t(T - 0.2, 1.0))
    assert rev.F(*args) == pytest.approx(-F(T - args[0], T - args[1], *args[2:]))
    np.testing.assert_allclose(back.F(*args), F(*args), rtol=1e-13)
    np.testing.assert_allclose(back.F_t(*args), F_t(*args), rtol=1e-13)
    assert back.g(0.4, 2.0) == pytest.approx(prob.g(0.4, 2.0))


def test_zero_cost_gives_zero_value():
    cp = quadratic(g=lambda t, y: 0 * y)
    cp.h = lambda t, s, y, a: 0 * a * (1 + t)
    pol = solve_equilibrium_hjb(cp, build_grid(9, 1, 16, 1.0, TWO_PI))
    assert np.all(pol.u == 0) and np.all(pol.v == 0)


def test_value_is_diagonal_of_field():
    pol = solve_equilibrium_hjb(quadratic(closed=True), build_grid(9, 1, 16, 1.0, TWO_PI))
    idx = np.arange(9)
    np.testing.assert_array_equal(pol.v, pol.u[idx, idx])
    assert np.all(pol.u[np.tril_indices(9, -1)] == 0)
    # terminal condition
    np.testing.assert_allclose(pol.v[-1], 1 - np.cos(pol.grid.y), atol=1e-14)
    assert np.all(np.abs(pol.e) <= 2.0)


def test_time_consistent_case_matches_classical_policy():
    cp = quadratic(sigma=0.8, closed=True, bounds=None)
    g = build_grid(17, 1, 32, 1.0, TWO_PI)
    pol = solve_equilibrium_hjb(cp, g, tol=1e-10)
    V, e = classical_hjb_policy(cp, g)
    assert np.abs(pol.v - V).max() <= 1e-8
    assert np.abs(pol.e - e).max() <= 1e-6


def test_hjb_residuals_shrink():
    cp = ControlProblem(
        b=lambda s, y, a: a + 0 * y,
        sigma=lambda s, y, a: 0.8 + 0 * y,
        h=lambda t, s, y, a: np.exp(-0.5 * (s - t)) * a**2,
        g=lambda t, y: 1 - np.cos(y) + 0 * t,
        argmin=lambda t, s, y, p, q: -p / 2,
    )
    res = []
    for n, m in ((9, 16), (17, 32)):
        res.append(verify_hjb_system(solve_equilibrium_hjb(cp, build_grid(n, 1, m, 1.0, TWO_PI), tol=1e-10)))
    (r1a, r2a), (r1b, r2b) = res
    # one-sided s-differences: first order
    assert r1b < 0.7 * r1a and r2b < 0.7 * r2a
    assert r2b < 0.1


def test_grid_horizon_checked():
    with pytest.raises(ArgumentError):
        solve_equilibrium_hjb(quadratic(T=0.5), build_grid(5, 1, 8, 1.0, TWO_PI))


def test_degenerate_diffusion_rejected():
    cp = ControlProblem(
        b=lambda s, y, a: a + 0 * y, sigma=lambda s, y, a: a + 0 * y,
        h=lambda t, s, y, a: a**2 + 0 * t, g=lambda t, y: np.cos(y) + 0 * t, bounds=[(-1.0, 1.0)], resolution=5,
    )
    with pytest.raises(ModelError, match="degenerate"):
        solve_equilibrium_hjb(cp, build_grid(5, 1, 8, 1.0, TWO_PI))
