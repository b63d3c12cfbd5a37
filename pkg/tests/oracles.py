"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle recomputes its quantity from
first principles with plain loops or a different discretisation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_holder(values, dt, dy, alpha):
    """Exhaustive alpha-norm of one slice ``values[j, k...]`` by explicit pair loops.

    Returns ``(sup, semi_s, semi_y)``.  The torus distance between lattice
    indices uses the wrapped index difference in every axis.
    """
    X = np.asarray(values, dtype=float)
    n_s = X.shape[0]
    space = X.shape[1:]
    n = space[0]
    nodes = list(itertools.product(*(range(m) for m in space)))
    sup = 0.0
    for j in range(n_s):
        for y in nodes:
            sup = max(sup, abs(X[(j,) + y]))
    semi_s = 0.0
    for j1 in range(n_s):
        for j2 in range(j1 + 1, n_s):
            denom = ((j2 - j1) * dt) ** (alpha / 2.0)
            for y in nodes:
                semi_s = max(semi_s, abs(X[(j1,) + y] - X[(j2,) + y]) / denom)
    semi_y = 0.0
    for j in range(n_s):
        for a, b in itertools.combinations(nodes, 2):
            w = [min(abs(p - q), n - abs(p - q)) for p, q in zip(a, b)]
            dist = math.sqrt(sum(x * x for x in w)) * dy
            semi_y = max(semi_y, abs(X[(j,) + a] - X[(j,) + b]) / dist ** alpha)
    return sup, semi_s, semi_y


def brute_force_bracket(U, dt, dy, alpha, V=None):
    """Max over t-slices of the alpha-norm (plus that of ``V`` when given)."""
    best = 0.0
    for i in range(U.shape[0]):
        nu = sum(brute_force_holder(U[i, : i + 1], dt, dy, alpha))
        if V is not None:
            nu += sum(brute_force_holder(V[i, : i + 1], dt, dy, alpha))
        best = max(best, nu)
    return best


def lq_game_recursion(rho, sigma, T, n_time, n_space, g_fn, weight_fn=None, L=2.0 * math.pi):
    """Discrete-time equilibrium of a one-dimensional LQ game on the torus.

    Dynamics ``dX = a ds + sigma dW`` are replaced by a Markov chain on the
    lattice (central-difference up/down probabilities, explicit substeps for
    stability).  Player ``j`` controls ``[s_j, s_{j+1})`` and minimises its
    own criterion ``w(s_j, s) a^2 ds + g(s_j, X_T)`` given the later players'
    strategies, using the one-step generator to pick ``a = -D1 J / (2 w)``.
    Every earlier evaluation time ``t`` then propagates its cost-to-go with
    the chosen control.  Returns the equilibrium value ``v[j, k] =
    J(s_j, s_j, y_k)`` on ``s_j = j dt``.
    """
    if weight_fn is None:
        def weight_fn(t, s):
            return math.exp(-rho * (s - t))
    dt = T / (n_time - 1)
    dy = L / n_space
    y = np.arange(n_space) * dy
    s_nodes = np.arange(n_time) * dt
    # J[t_index, k]: cost-to-go seen from evaluation time s_nodes[t_index]
    J = np.array([g_fn(s_nodes[i], y) for i in range(n_time)], dtype=float)
    v = np.zeros((n_time, n_space))
    v[-1] = J[-1]
    sub = max(1, math.ceil(sigma**2 * dt / dy**2 / 0.45))
    h = dt / sub
    for j in range(n_time - 2, -1, -1):
        own = J[j]
        d1 = (np.roll(own, -1) - np.roll(own, 1)) / (2 * dy)
        a = -d1 / (2.0 * weight_fn(s_nodes[j], s_nodes[j]))
        up = (0.5 * sigma**2 + 0.5 * dy * a) * h / dy**2
        down = (0.5 * sigma**2 - 0.5 * dy * a) * h / dy**2
        if np.any(up < 0) or np.any(down < 0) or np.any(up + down > 1):
            raise ValueError("Markov chain probabilities out of range; refine dy or raise sigma")
        for i in range(j + 1):
            w = weight_fn(s_nodes[i], s_nodes[j])
            x = J[i]
            for _ in range(sub):
                x = up * np.roll(x, -1) + down * np.roll(x, 1) + (1 - up - down) * x
            J[i] = w * a**2 * dt + x
        v[j] = J[j]
    return v
