import math

import numpy as np
import pytest

from problems import TWO_PI

from nonlocal_pde import (
    ArgumentError,
    BackwardField,
    NonlinearProblem,
    NumericalError,
    build_grid,
    bsde_residual_stats,
    evaluate_fk_fields,
    simulate_forward,
)


def test_no_noise_no_drift_stays_put():
    p = simulate_forward(0.0, 0.0, 1.25, 1.0, 10, 8)
    assert np.all(p.X == 1.25)


def test_unit_drift_moves_by_horizon():
    p = simulate_forward(1.0, 0.0, np.linspace(0, 1, 5), 1.0, 5, 16)
    np.testing.assert_allclose(p.X[:, -1, 0], np.linspace(0, 1, 5) + 1.0, rtol=1e-14)
    assert p.times[0] == 0.0 and p.times[-1] == pytest.approx(1.0)


def test_terminal_variance_within_five_standard_errors():
    n, sigma, T = 20_000, 0.5, 2.0
    p = simulate_forward(0.0, sigma, 0.0, T, n, 20, seed=11)
    var = p.X[:, -1, 0].var(ddof=1)
    se = sigma**2 * T * math.sqrt(2.0 / (n - 1))
    assert abs(var - sigma**2 * T) <= 5 * se


def test_seed_determinism():
    a = simulate_forward(0.2, 0.7, 0.0, 1.0, 50, 10, seed=4)
    b = simulate_forward(0.2, 0.7, 0.0, 1.0, 50, 10, seed=4)
    c = simulate_forward(0.2, 0.7, 0.0, 1.0, 50, 10, seed=5)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.dW, b.dW)
    assert not np.array_equal(a.X, c.X)


def test_path_argument_errors():
    with pytest.raises(ArgumentError):
        simulate_forward(0.0, 1.0, 0.0, 1.0, 0, 4)
    with pytest.raises(ArgumentError):
        simulate_forward(0.0, 1.0, 0.0, 1.0, 4, 4, t0=1.0)
    with pytest.raises(ArgumentError):
        simulate_forward(0.0, 1.0, np.zeros(3), 1.0, 4, 4)


def test_blow_up_reported():
    with pytest.raises(NumericalError, match="blew up"):
        simulate_forward(lambda s, y: y**3, 0.0, 10.0, 1.0, 3, 50)


def sine_field(n_time=17, n_space=32, T=1.0, y_dependent=True):
    # backward heat solution of u_s = -u_yy: u = exp(-(T - s)) sin y
    g = build_grid(n_time, 1, n_space, T, TWO_PI)
    s = g.tau[None, :, None]
    vals = np.exp(-(T - s)) * (np.sin(g.y)[None, None] if y_dependent else 1.0)
    vals = np.broadcast_to(vals, g.shape) * np.triu(np.ones((n_time, n_time)))[:, :, None]
    prob = NonlinearProblem(
        F=lambda t, s, y, u, p, q, l, m, n: -q if y_dependent else u,
        g=(lambda t, y: np.sin(y) + 0 * t) if y_dependent else 1.0,
    )
    return BackwardField(g, 0.0, T, vals, prob)


def test_z_vanishes_without_noise():
    f = sine_field()
    paths = simulate_forward(0.3, 0.0, np.linspace(0, TWO_PI, 40), 1.0, 40, 16)
    fk = evaluate_fk_fields(f, 0.0, paths)
    for i_t in (0, 5, 15):
        row = fk.at(i_t)
        assert np.all(row["Z"] == 0) and np.all(row["Gamma"] == 0)


def test_z_vanishes_for_space_independent_field():
    f = sine_field(y_dependent=False)
    paths = simulate_forward(0.0, 0.9, 0.5, 1.0, 40, 16, seed=2)
    fk = evaluate_fk_fields(f, 0.9, paths)
    assert np.all(fk.at(3)["Z"] == 0)
    # u_s = u with u = exp(s - T): Y(s) exactly tracks the field
    rep = bsde_residual_stats(fk)
    assert rep.max_abs_z == 0.0
    assert rep.max_abs_y < 1e-3


def test_heat_martingale_residual_has_zero_mean():
    f = sine_field(33, 64)
    sig = math.sqrt(2.0)
    paths = simulate_forward(0.0, sig, np.linspace(0, TWO_PI, 4000, endpoint=False), 1.0, 4000, 64, seed=9)
    rep = bsde_residual_stats(evaluate_fk_fields(f, sig, paths))
    assert rep.max_ratio_y <= 4.0 and rep.max_ratio_z <= 4.0
    assert len(rep.t_nodes) == 32 and rep.n_paths == 4000
    assert "per_path" not in rep.to_dict()


def test_first_step_is_first_path_time_at_or_after_t():
    f = sine_field(5, 16)
    paths = simulate_forward(0.0, 1.0, 0.0, 1.0, 4, 10)
    fk = evaluate_fk_fields(f, 1.0, paths)
    # t nodes 0, 0.25, 0.5, 0.75 on a path grid of step 0.1
    assert [fk.first_step(i) for i in range(4)] == [0, 3, 5, 8]


def test_field_argument_errors():
    f = sine_field(5, 16)
    with pytest.raises(ArgumentError):
        evaluate_fk_fields(f, 1.0, simulate_forward(0.0, 1.0, 0.0, 2.0, 4, 4))
    with pytest.raises(ArgumentError):
        evaluate_fk_fields(f, 1.0, simulate_forward(0.0, 1.0, 0.0, 1.0, 4, 4, d=2))
    f.problem = None
    with pytest.raises(ArgumentError):
        bsde_residual_stats(evaluate_fk_fields(f, 1.0, simulate_forward(0.0, 1.0, 0.0, 1.0, 4, 4)))
