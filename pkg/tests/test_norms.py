import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_bracket, brute_force_holder

from nonlocal_pde import ArgumentError, HolderConfig, TriField, build_grid, holder_norm_alpha, tri_norms
from nonlocal_pde.norms import max_pair_difference, slice_profile, sup_norm


def test_sup_norm_examples():
    assert sup_norm(np.full((3, 4), -3.0)) == 3.0
    assert sup_norm(np.zeros((2, 4))) == 0.0
    g = build_grid(5, 1, 4, 1.0, 1.0)
    assert sup_norm(np.broadcast_to(g.tau[:, None], (5, 4))) == 1.0
    with pytest.raises(ArgumentError):
        sup_norm(np.zeros((0, 4)))


def test_constant_slice_has_no_seminorm():
    g = build_grid(5, 1, 8, 1.0, 1.0)
    r = holder_norm_alpha(np.full((4, 8), -2.5), g)
    assert r.semi_s == 0 and r.semi_y == 0 and r.c_alpha == 2.5


def test_linear_in_s_slice():
    # semi_s = max |ds|^(1 - alpha/2), attained at separation 1
    g = build_grid(5, 1, 4, 1.0, 1.0)
    r = holder_norm_alpha(np.broadcast_to(g.tau[:, None], (5, 4)), g, HolderConfig(alpha=0.5))
    assert r.semi_s == 1.0 and r.semi_y == 0.0 and r.c_alpha == 2.0


def test_linear_in_y_slice_uses_wrapped_distance():
    # On the torus the jump from y = 0.75 back to y = 0 is one lattice step,
    # so the periodic seminorm exceeds the value 1 of the open interval.
    # Frozen from the brute-force oracle: sup 0.75, semi_y 1.5.
    g = build_grid(5, 1, 4, 1.0, 1.0)
    Y = np.broadcast_to(g.y, (5, 4))
    assert brute_force_holder(Y, g.dt, g.dy, 0.5) == (0.75, 0.0, 1.5)
    r = holder_norm_alpha(Y, g)
    assert (r.sup, r.semi_s, r.semi_y, r.c_alpha) == (0.75, 0.0, 1.5, 2.25)


def test_tri_norms_trivial_cases():
    g = build_grid(4, 1, 6, 1.0, 1.0)
    z = TriField.zeros(g)
    r = tri_norms(z, z)
    assert r.bracket == 0 and r.double_bracket == 0
    c = TriField.from_function(g, lambda t, s, y: -4.0 + 0 * (t + s + y))
    assert tri_norms(c).bracket == 4.0


def test_tri_norms_three_node_grid_frozen():
    # u = t s, v = s on three nodes; brute-force oracle gives 2 and 4
    g = build_grid(3, 1, 4, 1.0, 1.0)
    u = TriField.from_function(g, lambda t, s, y: t * s + 0 * y)
    v = TriField.from_function(g, lambda t, s, y: s + 0 * (t + y))
    assert brute_force_bracket(u.values, g.dt, g.dy, 0.5) == 2.0
    assert brute_force_bracket(u.values, g.dt, g.dy, 0.5, v.values) == 4.0
    r = tri_norms(u, v)
    assert r.bracket == 2.0 and r.double_bracket == 4.0


@pytest.mark.parametrize("n_time,n_space,alpha", [(3, 4, 0.5), (6, 7, 0.3), (10, 12, 0.8), (16, 16, 0.5)])
def test_tri_norms_equal_brute_force(n_time, n_space, alpha):
    rng = np.random.default_rng(n_time * 100 + n_space)
    g = build_grid(n_time, 1, n_space, 1.3, 2.0)
    mask = np.tril(np.ones((n_time, n_time)))[:, :, None]
    U, V = mask * rng.standard_normal(g.shape), mask * rng.standard_normal(g.shape)
    r = tri_norms(TriField(g, U), TriField(g, V), HolderConfig(alpha=alpha))
    assert r.bracket == brute_force_bracket(U, g.dt, g.dy, alpha)
    assert r.double_bracket == brute_force_bracket(U, g.dt, g.dy, alpha, V)


def test_two_dimensional_norms_equal_brute_force():
    rng = np.random.default_rng(5)
    g = build_grid(4, 2, 5, 1.0, 1.0)
    X = rng.standard_normal((3, 5, 5))
    r = holder_norm_alpha(X, g)
    assert (r.sup, r.semi_s, r.semi_y) == brute_force_holder(X, g.dt, g.dy, 0.5)


def test_two_plus_alpha_adds_derivative_terms():
    rng = np.random.default_rng(2)
    g = build_grid(5, 1, 6, 1.0, 1.0)
    X, Xs, Xy, Xyy = (rng.standard_normal((4, 6)) for _ in range(4))
    r = holder_norm_alpha(X, g, derivatives={"s": Xs, "y": Xy[None], "yy": Xyy[None, None]})
    expected = (
        np.abs(X).max()
        + sum(brute_force_holder(Xs, g.dt, g.dy, 0.5))
        + np.abs(Xy).max()
        + sum(brute_force_holder(Xyy, g.dt, g.dy, 0.5))
    )
    assert r.c_2alpha == pytest.approx(expected, rel=1e-15)
    with pytest.raises(ArgumentError):
        holder_norm_alpha(X, g, derivatives={"s": Xs})
    with pytest.raises(ArgumentError):
        holder_norm_alpha(X, g, order=2)


def test_alpha_range_checked():
    with pytest.raises(ArgumentError):
        HolderConfig(alpha=1.0)
    with pytest.raises(ArgumentError):
        HolderConfig(alpha=0.0)


def test_sampled_pairs_bounded_by_exhaustive():
    rng = np.random.default_rng(3)
    g = build_grid(12, 1, 16, 1.0, 1.0)
    U = np.tril(np.ones((12, 12)))[:, :, None] * rng.standard_normal(g.shape)
    u = TriField(g, U)
    full = tri_norms(u)
    sampled = tri_norms(u, cfg=HolderConfig(pair_budget=50, seed=1))
    assert sampled.sampled and not full.sampled
    assert sampled.semi_s <= full.semi_s and sampled.semi_y <= full.semi_y
    assert sampled.bracket <= full.bracket


def test_grid_mismatch_rejected():
    a = TriField.zeros(build_grid(3, 1, 4, 1.0, 1.0))
    b = TriField.zeros(build_grid(3, 1, 8, 1.0, 1.0))
    with pytest.raises(ArgumentError):
        tri_norms(a, b)


def test_max_pair_difference_zero_for_t_independent_field():
    g = build_grid(6, 1, 8, 1.0, 1.0)
    u = TriField.from_function(g, lambda t, s, y: np.sin(s + y) + 0 * t)
    assert max_pair_difference(u.values, g.dt, g.dy, 1) == 0.0
    w = TriField.from_function(g, lambda t, s, y: t + 0 * (s + y))
    assert max_pair_difference(w.values, g.dt, g.dy, 1) == pytest.approx(1.0)


slices = arrays(np.float64, (5, 6), elements=st.floats(-10, 10, allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(x=slices, lam=st.floats(-5, 5, allow_nan=False))
def test_homogeneity(x, lam):
    g = build_grid(6, 1, 6, 1.0, 1.0)
    a = holder_norm_alpha(x, g)
    b = holder_norm_alpha(lam * x, g)
    for k in ("sup", "semi_s", "semi_y", "c_alpha"):
        assert getattr(b, k) == pytest.approx(abs(lam) * getattr(a, k), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(x=slices, y=slices)
def test_triangle_inequality(x, y):
    g = build_grid(6, 1, 6, 1.0, 1.0)
    a, b, c = holder_norm_alpha(x, g), holder_norm_alpha(y, g), holder_norm_alpha(x + y, g)
    for k in ("sup", "semi_s", "semi_y", "c_alpha"):
        assert getattr(c, k) <= getattr(a, k) + getattr(b, k) + 1e-12


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, (7, 7, 5), elements=st.floats(-3, 3, allow_nan=False)))
def test_slice_norm_monotone_in_domain(x):
    # the slice norm over [0, tau_i] never decreases as i grows
    prof = slice_profile(np.broadcast_to(x[-1], x.shape), 0.1, 0.2, 1, HolderConfig())
    assert np.all(np.diff(prof["c_alpha"]) >= 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 7), m=st.integers(4, 7))
def test_exhaustive_equals_brute_force_property(seed, n, m):
    rng = np.random.default_rng(seed)
    g = build_grid(n, 1, m, 1.0, math.pi)
    U = np.tril(np.ones((n, n)))[:, :, None] * rng.standard_normal(g.shape)
    assert tri_norms(TriField(g, U)).bracket == brute_force_bracket(U, g.dt, g.dy, 0.5)
