# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Nonlocal linear solver
#
# The unknown `u(t, s, y)` lives on the triangle `0 <= s <= t <= T` with a
# periodic `y`.  Its equation couples every row to the diagonal `u(s, s, y)`:
#
#     u_s = a u_yy + abar u_yy(s, s, y) + f,   u(t, 0, y) = g(t, y)
#
# We solve a manufactured case with exact solution `exp(t - s)(2 + sin y)`
# and watch the error fall by four per grid halving.

# %%
import numpy as np

from nonlocal_pde import LinearCoefficients, build_grid, solve_linear, tri_norms

TWO_PI = 2 * np.pi
abar = 0.2
coeffs = LinearCoefficients(
    a=1.0,
    abar=abar,
    f=lambda t, s, y: -2 * np.exp(t - s) + abar * np.sin(y),
    f_t=lambda t, s, y: -2 * np.exp(t - s) + 0 * y,
    g=lambda t, y: np.exp(t) * (2 + np.sin(y)),
    g_t=lambda t, y: np.exp(t) * (2 + np.sin(y)),
)


def exact(grid):
    t, s, (y,) = grid.ts_mesh()
    return np.broadcast_to(np.exp(t - s) * (2 + np.sin(y)), grid.shape) * grid.tri_mask()


# %%
errors = []
for n_time, n_space in ((17, 32), (33, 64), (65, 128)):
    grid = build_grid(n_time, 1, n_space, 1.0, TWO_PI)
    sol = solve_linear(coeffs, grid, tol=1e-10)
    errors.append(np.abs(sol.u.values - exact(grid)).max())
    print(f"{n_time:4d} x {n_space:4d}  max error {errors[-1]:.3e}  iterations {sol.report.iterations}")
print("ratios", [round(errors[k] / errors[k + 1], 2) for k in range(2)])

# %% [markdown]
# The Picard loop reports one contraction factor per step: the ratio of
# successive increments in the bracket norm.

# %%
print([round(x, 3) for x in sol.report.contraction_factors])
print(sol.report.subintervals)

# %% [markdown]
# Norm of the solution pair `(u, u_t)` in the parabolic Hölder norm.

# %%
print(tri_norms(sol.u, sol.v))
