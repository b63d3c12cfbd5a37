import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonlocal_pde import ConfigurationError, GridIndexError, TriField, build_grid, restrict_diagonal
from nonlocal_pde.grid import (
    DiagField,
    diag_derivatives,
    embed_s_independent,
    embed_t_independent,
    integrate_t_segment,
    segment_integrals,
)


def test_build_grid_spacings():
    g = build_grid(2, 1, 4, 1.0, 1.0)
    assert g.dt == 1.0 and g.dy == 0.25
    g = build_grid(11, 1, 8, 1.0, 6.2831853)
    assert g.dt == pytest.approx(0.1)
    assert g.dy == pytest.approx(0.7854, abs=1e-4)
    assert g.shape == (11, 11, 8)


@pytest.mark.parametrize(
    "args",
    [(1, 1, 4, 1.0, 1.0), (4, 3, 8, 1.0, 1.0), (4, 1, 3, 1.0, 1.0), (4, 1, 8, 0.0, 1.0), (4, 1, 8, 1.0, -1.0)],
)
def test_build_grid_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        build_grid(*args)


def test_refine_halves_both_spacings():
    g = build_grid(9, 1, 16, 1.0, 2 * math.pi)
    r = g.refine()
    assert r.dt == pytest.approx(g.dt / 2) and r.dy == pytest.approx(g.dy / 2)


def test_read_above_diagonal_rejected():
    u = TriField.zeros(build_grid(4, 1, 4, 1.0, 1.0))
    u.at(3, 3)
    with pytest.raises(GridIndexError):
        u.at(1, 2)


def test_trifield_rejects_non_finite():
    g = build_grid(3, 1, 4, 1.0, 1.0)
    vals = np.zeros(g.shape)
    vals[2, 1, 0] = np.nan
    with pytest.raises(Exception):
        TriField(g, vals)


def test_restrict_diagonal_examples():
    g = build_grid(6, 1, 8, 1.0, 1.0)
    s = g.tau[:, None]
    y = g.y[None, :]
    d = restrict_diagonal(TriField.from_function(g, lambda t, s, y: t + s + 0 * y))
    np.testing.assert_allclose(d.values, 2 * s + 0 * y)
    d = restrict_diagonal(TriField.from_function(g, lambda t, s, y: t * y + 0 * s))
    np.testing.assert_allclose(d.values, s * y)
    d = restrict_diagonal(TriField.from_function(g, lambda t, s, y: 7.0 + 0 * (t + s + y)))
    assert np.all(d.values == 7.0)


def test_diag_derivatives_of_trig_functions():
    g = build_grid(4, 1, 64, 1.0, 2 * math.pi)
    y = g.y[None, :] + 0 * g.tau[:, None]
    grad, hess = diag_derivatives(DiagField(g, np.sin(y)))
    assert np.abs(grad[0].values - np.cos(y)).max() <= g.dy**2
    grad, hess = diag_derivatives(DiagField(g, np.cos(y)))
    assert np.abs(hess[(0, 0)].values + np.cos(y)).max() <= g.dy**2
    grad, hess = diag_derivatives(DiagField(g, np.full_like(y, 3.0)))
    assert np.all(grad[0].values == 0) and np.all(hess[(0, 0)].values == 0)


def test_diag_hessian_symmetric_in_two_dimensions():
    g = build_grid(3, 2, 16, 1.0, 2 * math.pi)
    y1, y2 = g.lattice(lead=1)
    phi = np.sin(y1) * np.cos(2 * y2) + 0 * g.tau[:, None, None]
    _, hess = diag_derivatives(DiagField(g, phi))
    assert hess[(0, 1)] is hess[(1, 0)]
    exact = -2 * np.cos(y1) * np.sin(2 * y2)
    assert np.abs(hess[(0, 1)].values - exact).max() < 5 * g.dy**2


def test_integrate_t_segment_examples():
    g = build_grid(5, 1, 4, 1.0, 1.0)
    ones = TriField.from_function(g, lambda t, s, y: 1.0 + 0 * (t + s + y))
    assert integrate_t_segment(ones, 2, 1, 0) == pytest.approx(0.25)
    theta = TriField.from_function(g, lambda t, s, y: t + 0 * (s + y))
    assert integrate_t_segment(theta, 4, 0, 0) == 0.5
    assert integrate_t_segment(TriField.zeros(g), 4, 0, 2) == 0.0
    assert integrate_t_segment(theta, 3, 3, 1) == 0.0
    with pytest.raises(GridIndexError):
        integrate_t_segment(theta, 1, 2, 0)


def test_segment_integrals_match_pointwise_rule():
    g = build_grid(7, 1, 5, 1.0, 1.0)
    v = TriField.from_function(g, lambda t, s, y: np.sin(3 * t + s) * np.cos(y))
    table = segment_integrals(v.values, g.dt)
    for i in range(g.n_time):
        for j in range(i + 1):
            assert table[i, j, 3] == pytest.approx(integrate_t_segment(v, i, j, 3), abs=1e-14)


def test_integrate_t_segment_second_order():
    errs = []
    for n in (9, 17, 33):
        g = build_grid(n, 1, 4, 1.0, 1.0)
        v = TriField.from_function(g, lambda t, s, y: np.exp(t) + 0 * (s + y))
        approx = integrate_t_segment(v, n - 1, 0, 0)
        errs.append(abs(approx - (math.e - 1.0)))
    assert errs[0] / errs[1] > 3.9 and errs[1] / errs[2] > 3.9


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 12), data=st.data())
def test_integrate_t_segment_additive(n, data):
    g = build_grid(n, 1, 4, 1.0, 1.0)
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    v = TriField(g, np.tril(np.ones((n, n)))[:, :, None] * rng.standard_normal(g.shape))
    i_t = data.draw(st.integers(0, n - 1))
    i_s = data.draw(st.integers(0, i_t))
    m = data.draw(st.integers(i_s, i_t))
    col = v.values[m : i_t + 1, i_s, 1]
    tail = g.dt * (col.sum() - 0.5 * (col[0] + col[-1])) if i_t > m else 0.0
    whole = integrate_t_segment(v, i_t, i_s, 1)
    assert whole == pytest.approx(integrate_t_segment(v, m, i_s, 1) + tail, abs=1e-12)


def test_diagonal_of_t_independent_embedding_is_identity():
    g = build_grid(6, 1, 8, 1.0, 1.0)
    phi = np.random.default_rng(0).standard_normal((6, 8))
    np.testing.assert_array_equal(restrict_diagonal(embed_t_independent(g, phi)).values, phi)
    rows = np.random.default_rng(1).standard_normal((6, 8))
    np.testing.assert_array_equal(restrict_diagonal(embed_s_independent(g, rows)).values, rows)


def test_field_arithmetic_and_immutability():
    g = build_grid(3, 1, 4, 1.0, 1.0)
    u = TriField.from_function(g, lambda t, s, y: 1.0 + t + 0 * (s + y))
    w = 2 * u - u + 0.5
    np.testing.assert_allclose(w.values, np.tril(np.ones((3, 3)))[:, :, None] * (u.values + 0.5))
    with pytest.raises(ValueError):
        u.values[0, 0, 0] = 3.0
