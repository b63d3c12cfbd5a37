# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Equilibrium HJB for a time-inconsistent control problem
#
# Controlled state `dX = a ds + 0.8 dW` with running cost
# `exp(-rho (s - t)) a^2` and terminal cost `g(t, X_T)` evaluated from time
# `t`.  When `g` depends on `t` the preferences change over time and the
# equilibrium policy differs from the classical optimum.  The closures below
# read `rho` when they are called.

# %%
import numpy as np

from nonlocal_pde import ControlProblem, build_grid, classical_hjb_policy, solve_equilibrium_hjb

TWO_PI = 2 * np.pi
sigma = 0.8


def control_problem(kappa):
    return ControlProblem(
        b=lambda s, y, a: a + 0 * y,
        sigma=lambda s, y, a: sigma + 0 * y + 0 * a,
        h=lambda t, s, y, a: np.exp(-rho * (s - t)) * a**2,
        g=lambda t, y: np.exp(-rho * (1 - t)) * (1 - np.cos(y - kappa * t)),
        argmin=lambda t, s, y, p, q: -p * np.exp(rho * (s - t)) / 2,
    )


grid = build_grid(33, 1, 64, 1.0, TWO_PI)

# %% [markdown]
# Without discounting and with a fixed terminal cost the problem is time
# consistent: the equilibrium matches the classical policy up to the
# solver tolerance.

# %%
rho = 0.0
cp = control_problem(0.0)
pol = solve_equilibrium_hjb(cp, grid, tol=1e-10)
V, e = classical_hjb_policy(cp, grid)
print("value gap ", np.abs(pol.v - V).max())
print("policy gap", np.abs(pol.e - e).max())

# %% [markdown]
# With discounting and `kappa = 1` the target of the terminal cost drifts
# with the evaluation time.  The classical solver, which freezes the costs
# seen at time `s`, no longer describes the equilibrium.

# %%
rho = 0.5
cp = control_problem(1.0)
pol = solve_equilibrium_hjb(cp, grid, tol=1e-10)
V, e = classical_hjb_policy(cp, grid)
print("policy gap", np.abs(pol.e - e).max())
print("equilibrium control at s = 0:", np.round(pol.e[0, ::8], 3))
