import numpy as np
import pytest

from problems import TWO_PI, manufactured_linear, manufactured_nonlinear, t_dependent_linear

from nonlocal_pde import LinearCoefficients, ModelError, NonlinearProblem, TriField, build_grid, solve_linear, solve_nonlinear, tri_norms
from nonlocal_pde.grid import embed_s_independent
from nonlocal_pde.nonlinear import (
    anchor_linearization,
    check_regularity,
    lambda_map,
    linear_as_nonlinear,
    residual_nonlinear,
)


def grid(n_time=17, n_space=32, T=1.0):
    return build_grid(n_time, 1, n_space, T, TWO_PI)


def F_heat(t, s, y, u, p, q, l, m, n):
    return q


def F_heat_diag(t, s, y, u, p, q, l, m, n):
    return q + n


def sine_problem(F, **kw):
    return NonlinearProblem(F=F, g=lambda t, y: np.sin(y) + 0 * t, g_t=0.0, **kw)


def test_anchor_of_pure_diffusion():
    an = anchor_linearization(sine_problem(F_heat), grid(5, 16))
    assert np.allclose(an.a, 1.0, atol=1e-9)
    for name in ("abar", "b", "bbar", "c", "cbar"):
        assert np.abs(getattr(an, name)).max() < 1e-9
    an = anchor_linearization(sine_problem(F_heat_diag), grid(5, 16))
    assert np.allclose(an.a, 1.0, atol=1e-9) and np.allclose(an.abar, 1.0, atol=1e-9)


def test_anchor_derivative_of_sine_term():
    # F = q + eps sin(n) with g = sin y: the anchor has n = g_yy = -sin y (up to
    # the central-difference error), so abar = eps cos(-sin y).
    eps = 0.3
    g = grid(5, 64)

    def F(t, s, y, u, p, q, l, m, n):
        return q + eps * np.sin(n)

    def F_n(t, s, y, u, p, q, l, m, n):
        return eps * np.cos(n)

    an_fd = anchor_linearization(sine_problem(F), g)
    an_sym = anchor_linearization(sine_problem(F, F_n=F_n), g)
    n_anchor = (np.sin(g.y - g.dy) - 2 * np.sin(g.y) + np.sin(g.y + g.dy)) / g.dy**2
    np.testing.assert_allclose(an_sym.abar[0, 0, 0], eps * np.cos(n_anchor), rtol=1e-13)
    np.testing.assert_allclose(an_fd.abar, an_sym.abar, atol=1e-8)
    assert np.abs(an_sym.abar[0, 0, 0] - eps * np.cos(-np.sin(g.y))).max() < eps * g.dy**2


def test_anchor_rejects_non_elliptic():
    with pytest.raises(ModelError, match="local part"):
        anchor_linearization(sine_problem(lambda t, s, y, u, p, q, l, m, n: -q), grid(5, 8))
    with pytest.raises(ModelError, match="local plus diagonal"):
        anchor_linearization(sine_problem(lambda t, s, y, u, p, q, l, m, n: q - 2 * n), grid(5, 8))


def test_lambda_map_independent_of_input_for_exact_linearisation():
    g = grid(9, 16)
    for F in (F_heat, F_heat_diag):
        prob = sine_problem(F)
        seed_u = embed_s_independent(g, np.broadcast_to(np.sin(g.y), (9, 16)))
        wild = TriField(g, seed_u.values + np.tril(np.ones((9, 9)))[:, :, None] * np.cos(3 * g.y) * (g.tau[None, :, None]))
        zero_v = TriField.zeros(g)
        a, _ = lambda_map(seed_u, zero_v, prob, tol=1e-12)
        b, _ = lambda_map(wild, zero_v, prob, tol=1e-12)
        assert np.abs(a.values - b.values).max() < 1e-9


def test_lambda_map_checks_initial_row():
    g = grid(5, 8)
    with pytest.raises(Exception, match="initial row"):
        lambda_map(TriField.zeros(g), TriField.zeros(g), sine_problem(F_heat))


def test_zero_problem_gives_zero():
    sol = solve_nonlinear(NonlinearProblem(F=lambda t, s, y, u, p, q, l, m, n: q + 0.1 * np.sin(n)), grid(9, 16))
    assert np.all(sol.u.values == 0)


def test_linear_path_exact_for_t_independent_coefficients():
    g = grid()
    tol = 1e-9
    coeffs, _ = manufactured_linear()
    lin = solve_linear(coeffs, g, tol=tol)
    non = solve_nonlinear(linear_as_nonlinear(coeffs), g, tol=tol)
    assert np.abs(lin.u.values - non.u.values).max() <= 10 * tol


def test_linear_path_gap_vanishes_for_t_dependent_coefficients():
    # anchored coefficients are differenced in t, so the two paths differ by a
    # discretisation error that shrinks under refinement
    coeffs = t_dependent_linear()
    gaps = []
    for n, m in ((17, 32), (33, 64)):
        g = grid(n, m)
        lin = solve_linear(coeffs, g, tol=1e-9)
        non = solve_nonlinear(linear_as_nonlinear(coeffs), g, tol=1e-9)
        gaps.append(np.abs(lin.u.values - non.u.values).max())
    assert gaps[0] <= g.dt * 4 * 0.1
    assert gaps[0] / gaps[1] >= 3.5


def test_manufactured_nonlinear_errors_frozen():
    prob, exact = manufactured_nonlinear(0.1)
    errs = []
    for n, m in ((17, 32), (33, 64)):
        g = grid(n, m)
        errs.append(np.abs(solve_nonlinear(prob, g, tol=1e-10).u.values - exact(g)).max())
    # frozen regression values; the linear version of this problem gives 4.2039e-3
    assert errs[0] == pytest.approx(4.0206e-3, rel=1e-3)
    assert errs[1] == pytest.approx(1.0046e-3, rel=1e-3)


def test_residual_of_injected_exact_solution():
    prob, exact = manufactured_nonlinear(0.1)
    base = []
    for n, m in ((17, 32), (33, 64)):
        g = grid(n, m)
        base.append(residual_nonlinear(TriField(g, exact(g)), prob))
    # forward s-differences make the baseline first order in dt
    assert 1.7 < base[0] / base[1] < 2.3
    g = grid(33, 64)
    solved = residual_nonlinear(solve_nonlinear(prob, g, tol=1e-10).u, prob)
    assert solved <= 10 * base[1]


def test_residual_zero_for_zero_field():
    prob = NonlinearProblem(F=lambda t, s, y, u, p, q, l, m, n: q + u * l)
    assert residual_nonlinear(TriField.zeros(grid(5, 8)), prob) == 0.0


def test_fixed_point_under_one_more_lambda_application():
    prob, _ = manufactured_nonlinear(0.1)
    g = grid()
    tol = 1e-10
    sol = solve_nonlinear(prob, g, tol=tol)
    U, V = lambda_map(sol.u, sol.v, prob, tol=1e-12)
    assert tri_norms(U - sol.u, V - sol.v).double_bracket <= 10 * tol


def test_reanchoring_keeps_shared_rows():
    prob, exact = manufactured_nonlinear(0.1)
    g = grid()
    whole = solve_nonlinear(prob, g, tol=1e-10)
    split = solve_nonlinear(prob, g, tol=1e-10, initial_window=4)
    subs = split.report.subintervals
    assert len(subs) == 4 and [a for a, _ in subs[1:]] == [b for _, b in subs[:-1]]
    # both are second-order approximations of the same solution
    err_whole = np.abs(whole.u.values - exact(g)).max()
    err_split = np.abs(split.u.values - exact(g)).max()
    assert err_split <= 3 * err_whole


def test_regularity_of_pure_diffusion():
    rep = check_regularity(sine_problem(F_heat), grid(5, 8), samples=256)
    assert rep.lipschitz["q"] == pytest.approx(1.0, abs=1e-6)
    for slot in ("u", "p", "l", "m", "n"):
        assert rep.lipschitz[slot] == 0.0
    assert rep.ellipticity_ok and not rep.flags


def test_regularity_flags_negative_diffusion():
    rep = check_regularity(sine_problem(lambda t, s, y, u, p, q, l, m, n: -q), grid(5, 8), samples=64)
    assert not rep.ellipticity_ok
    assert any("local ellipticity" in f for f in rep.flags)


def test_regularity_of_sine_term():
    eps = 0.2
    rep = check_regularity(
        sine_problem(lambda t, s, y, u, p, q, l, m, n: q + eps * np.sin(n)), grid(5, 8), samples=2048
    )
    assert rep.lipschitz["n"] == pytest.approx(eps, rel=0.05)
    assert rep.lipschitz["n"] <= eps * (1 + 1e-6)


def test_regularity_flags_growth():
    rep = check_regularity(sine_problem(lambda t, s, y, u, p, q, l, m, n: q + u**3), grid(5, 8), samples=256)
    assert "F" in rep.unbounded_growth


def test_two_dimensional_nonlinear_matches_linear():
    c2 = LinearCoefficients(
        a=[[1.0, 0.1], [0.1, 1.0]], abar=[[0.2, 0.0], [0.0, 0.2]],
        f=lambda t, s, y1, y2: np.sin(y1 + s) * np.cos(y2),
        g=lambda t, y1, y2: np.cos(y1 - y2) * (1 + t),
        g_t=lambda t, y1, y2: np.cos(y1 - y2),
    )
    g2 = build_grid(5, 2, 8, 0.5, TWO_PI)
    lin = solve_linear(c2, g2, tol=1e-10)
    non = solve_nonlinear(linear_as_nonlinear(c2, d=2), g2, tol=1e-10)
    assert np.abs(lin.u.values - non.u.values).max() <= 1e-8
