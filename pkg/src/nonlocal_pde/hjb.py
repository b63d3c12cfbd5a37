"""Equilibrium HJB equations of time-inconsistent control problems.

A control problem with cost ``E[int_s^T h(t, tau, X, a) dtau + g(t, X_T)]``
evaluated from time ``t`` leads to the backward nonlocal equation

    u_s(t,s,y) + H(t, s, y, e(s,y), u_y, u_yy) = 0,   u(t,T,y) = g(t,y),

with ``e(s,y) = argmin_a H(s, s, y, a, u_y(s,s,y), u_yy(s,s,y))``.  It is
solved by reversing time, which produces a forward problem on the triangle
``s' <= t'`` for the nonlinear solver.

Argument conventions: for ``d = 1`` the state arguments are plain arrays,
otherwise stacked with the component axis first.  Controls follow the same
rule with their dimension ``m``.  ``b`` returns ``d`` components and ``sigma``
a ``d x k`` matrix (plain arrays when ``d = k = 1``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ArgumentError, ModelError
from .grid import TriangleGrid, gradient, hessian, restrict_diagonal, s_difference
from .linear import LinearSolution
from .local import LocalOperatorSlice, min_eigenvalue, solve_parameterized_local
from .nonlinear import NonlinearProblem, solve_nonlinear


class ControlBoundaryWarning(UserWarning):
    """The grid-search minimiser sits on the boundary of the control box."""


@dataclass
class ControlProblem:
    """Time-inconsistent stochastic control problem.

    ``bounds`` is a list of ``(low, high)`` pairs, one per control axis, used
    by the grid search with ``resolution`` points per axis.  ``argmin``
    optionally supplies the minimiser in closed form as
    ``argmin(t, s, y, p, q)``; it is required when ``bounds`` is ``None``.
    ``negate_costs`` flips the sign of ``h`` and ``g`` so that a
    maximisation problem can be posed as a minimisation.
    """

    b: Callable
    sigma: Callable
    h: Callable
    g: Callable
    T: float = 1.0
    d: int = 1
    m: int = 1
    k: int = 1
    bounds: list | None = None
    resolution: int = 64
    argmin: Callable | None = None
    g_t: Callable | None = None
    negate_costs: bool = False

    def __post_init__(self):
        if self.bounds is None and self.argmin is None:
            raise ArgumentError("a control problem needs either a control box or a closed-form argmin")
        if self.bounds is not None:
            self.bounds = [tuple(map(float, bd)) for bd in self.bounds]
            if len(self.bounds) != self.m:
                raise ArgumentError(f"expected {self.m} control bounds, got {len(self.bounds)}")
            for lo, hi in self.bounds:
                if not lo < hi:
                    raise ArgumentError(f"empty control interval [{lo}, {hi}]")
        if self.resolution < 3:
            raise ArgumentError("control grid resolution must be at least 3")
        if self.T <= 0:
            raise ArgumentError("horizon T must be positive")

    def cost_sign(self) -> float:
        return -1.0 if self.negate_costs else 1.0


@dataclass
class EquilibriumPolicy:
    """Equilibrium control ``e(s, y)``, value ``v(s, y) = u(s, s, y)`` and ``u``.

    ``s`` holds the s-nodes in increasing order.  ``u`` is the backward field:
    ``u[i, j]`` approximates ``u(s_i, s_j, .)`` for ``i <= j`` (zero below the
    diagonal).  ``forward`` is the solution in reversed time.
    """

    s: np.ndarray
    e: np.ndarray
    v: np.ndarray
    u: np.ndarray
    forward: LinearSolution
    problem: ControlProblem
    grid: TriangleGrid
    t0: float
    report: dict = field(default_factory=dict)


# -- component helpers ----------------------------------------------------------


def _stack(x, n):
    """User convention -> component-first array with ``n`` components."""
    x = np.asarray(x, dtype=float)
    return x[None] if n == 1 else x


def _unstack(x, n):
    return x[0] if n == 1 else x


def _call_b(cp, s, Y, A):
    out = np.asarray(cp.b(s, _unstack(Y, cp.d), _unstack(A, cp.m)), dtype=float)
    return out[None] if cp.d == 1 else out


def _call_sigma(cp, s, Y, A):
    out = np.asarray(cp.sigma(s, _unstack(Y, cp.d), _unstack(A, cp.m)), dtype=float)
    if cp.d == 1 and cp.k == 1:
        return out[None, None]
    return out


def _H(cp, t, s, Y, A, P, Q):
    """Hamiltonian with component-first ``Y (d,..)``, ``A (m,..)``, ``P (d,..)``, ``Q (d,d,..)``."""
    with np.errstate(all="ignore"):
        sig = _call_sigma(cp, s, Y, A)
        ss = np.einsum("ik...,jk...->ij...", sig, sig)
        drift = _call_b(cp, s, Y, A)
        cost = cp.cost_sign() * np.asarray(cp.h(t, s, _unstack(Y, cp.d), _unstack(A, cp.m)), dtype=float)
        out = 0.5 * np.einsum("ij...,ij...->...", Q, ss) + np.einsum("i...,i...->...", P, drift) + cost
    return out


def _check_feasible(cp, A):
    if cp.bounds is None:
        return
    for i, (lo, hi) in enumerate(cp.bounds):
        span = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(A[i] < lo - span) or np.any(A[i] > hi + span):
            raise ArgumentError(f"control component {i} outside U = [{lo}, {hi}]")


def hamiltonian(cp: ControlProblem, t, s, y, a, p, q):
    """``0.5 tr(q sigma sigma^T) + p.b + h`` at the given arguments."""
    A = _stack(a, cp.m)
    _check_feasible(cp, A)
    P = _stack(p, cp.d)
    Q = np.asarray(q, dtype=float)
    if cp.d == 1:
        Q = Q[None, None]
    return _H(cp, t, s, _stack(y, cp.d), A, P, Q)


# -- minimisation over the control set --------------------------------------------


def _control_axes(cp):
    return [np.linspace(lo, hi, cp.resolution) for lo, hi in cp.bounds]


def _grid_argmin(cp, t, s, Y, P, Q, warn=True):
    axes = _control_axes(cp)
    base = np.broadcast_shapes(np.shape(t), np.shape(s), Y.shape[1:], P.shape[1:], Q.shape[2:])
    best = np.full(base, np.inf)
    best_idx = np.zeros(base, dtype=np.int64)
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, cp.m)
    pad = (1,) * len(base)
    for k, point in enumerate(points):
        A = point.reshape((cp.m,) + pad)
        val = np.broadcast_to(_H(cp, t, s, Y, A, P, Q), base)
        val = np.where(np.isnan(val), np.inf, val)
        better = val < best
        best = np.where(better, val, best)
        best_idx = np.where(better, k, best_idx)
    if not np.all(np.isfinite(best)):
        raise ModelError("Hamiltonian is not finite anywhere on the control grid at some node")
    sub = np.unravel_index(best_idx, (cp.resolution,) * cp.m)
    A = np.stack([axes[i][sub[i]] for i in range(cp.m)])
    # one quadratic refinement per control axis
    out = A.copy()
    on_edge = np.zeros(base, dtype=bool)
    for i in range(cp.m):
        h = axes[i][1] - axes[i][0]
        inner = (sub[i] > 0) & (sub[i] < cp.resolution - 1)
        Ap, Am = A.copy(), A.copy()
        Ap[i] = np.minimum(A[i] + h, axes[i][-1])
        Am[i] = np.maximum(A[i] - h, axes[i][0])
        fp = np.broadcast_to(_H(cp, t, s, Y, Ap, P, Q), base)
        fm = np.broadcast_to(_H(cp, t, s, Y, Am, P, Q), base)
        curv = fp - 2.0 * best + fm
        with np.errstate(all="ignore"):
            shift = np.where(curv > 0, 0.5 * h * (fm - fp) / curv, 0.0)
        shift = np.clip(np.nan_to_num(shift), -h, h)
        out[i] = np.where(inner, A[i] + shift, A[i])
        neighbour = np.where(sub[i] == 0, fp, fm)
        on_edge |= ~inner & (neighbour > best)
    if warn and np.any(on_edge):
        warnings.warn(
            f"grid-search minimiser on the boundary of the control box at {int(on_edge.sum())} node(s)",
            ControlBoundaryWarning,
            stacklevel=3,
        )
    return out


def _argmin(cp, t, s, Y, P, Q, warn=True):
    if cp.argmin is not None:
        with np.errstate(all="ignore"):
            out = cp.argmin(t, s, _unstack(Y, cp.d), _unstack(P, cp.d), Q[0, 0] if cp.d == 1 else Q)
        base = np.broadcast_shapes(np.shape(t), np.shape(s), Y.shape[1:], P.shape[1:], Q.shape[2:])
        out = _stack(out, cp.m)
        return np.array(np.broadcast_to(out, (cp.m,) + base))
    return _grid_argmin(cp, t, s, Y, P, Q, warn)


def argmin_control(cp: ControlProblem, t, s, y, p, q, warn: bool = True):
    """Minimiser of ``a -> H(t, s, y, a, p, q)`` over the control set.

    Grid search over ``resolution`` points per axis (first minimum in
    lexicographic order wins ties), then one parabolic refinement per axis.
    A closed form, when supplied, takes precedence.
    """
    Q = np.asarray(q, dtype=float)
    if cp.d == 1:
        Q = Q[None, None]
    return _unstack(_argmin(cp, t, s, _stack(y, cp.d), _stack(p, cp.d), Q, warn), cp.m)


# -- time reversal ----------------------------------------------------------------


def _reverse_fn(fn, T, sign):
    if fn is None:
        return None

    def rev(t, s, *rest):
        return sign * np.asarray(fn(T - t, T - s, *rest), dtype=float)

    return rev


def time_reverse(prob: NonlinearProblem, T: float) -> NonlinearProblem:
    """Map a problem on ``t <= s <= T`` to one on ``s' <= t' <= T - t0`` and back.

    With ``t' = T - t`` and ``s' = T - s`` the equation ``u_s = F`` becomes
    ``u'_{s'} = -F(T - t', T - s', ...)`` and the data at ``s = T`` become the
    initial row ``g'(t', y) = g(T - t', y)``.  Applying the map twice returns
    an equivalent problem.
    """

    g, g_t = prob.g, prob.g_t

    if callable(g):
        def g_rev(t, *y):
            return g(T - t, *y)
    else:
        g_rev = g
    if g_t is None:
        g_t_rev = None
    elif callable(g_t):
        def g_t_rev(t, *y):
            return -np.asarray(g_t(T - t, *y), dtype=float)
    else:
        g_t_rev = -float(g_t)
    return NonlinearProblem(
        F=_reverse_fn(prob.F, T, -1.0),
        g=g_rev,
        g_t=g_t_rev,
        d=prob.d,
        F_u=_reverse_fn(prob.F_u, T, -1.0),
        F_p=_reverse_fn(prob.F_p, T, -1.0),
        F_q=_reverse_fn(prob.F_q, T, -1.0),
        F_l=_reverse_fn(prob.F_l, T, -1.0),
        F_m=_reverse_fn(prob.F_m, T, -1.0),
        F_n=_reverse_fn(prob.F_n, T, -1.0),
        F_t=_reverse_fn(prob.F_t, T, 1.0),
        h_F=prob.h_F,
    )


class _PolicyCache:
    """Remembers the last few diagonal argmin evaluations.

    The derivative stencils of the nonlinear solver re-evaluate F with the
    diagonal arguments unchanged, so most argmin calls repeat.
    """

    def __init__(self, size=8):
        self.size = size
        self.store: list = []

    def get(self, key):
        for k, v in self.store:
            if k == key:
                return v
        return None

    def put(self, key, value):
        self.store.append((key, value))
        if len(self.store) > self.size:
            self.store.pop(0)


def _key(*arrays):
    return tuple((a.shape, a.tobytes()) for a in map(np.ascontiguousarray, map(np.asarray, arrays)))


def backward_problem(cp: ControlProblem) -> NonlinearProblem:
    """``u_s = -H(t, s, y, phi(s, s, y, m, n), p, q)`` with terminal data ``g``."""
    cache = _PolicyCache()
    d = cp.d

    def policy(s, Y, M, Nn):
        key = _key(s, Y, M, Nn)
        hit = cache.get(key)
        if hit is None:
            hit = _argmin(cp, s, s, Y, M, Nn, warn=False)
            cache.put(key, hit)
        return hit

    def F(t, s, y, u, p, q, l, m, n):
        Y, P, M = _stack(y, d), _stack(p, d), _stack(m, d)
        Q = np.asarray(q, dtype=float)
        Nn = np.asarray(n, dtype=float)
        if d == 1:
            Q, Nn = Q[None, None], Nn[None, None]
        A = policy(np.asarray(s, dtype=float), Y, M, Nn)
        return -_H(cp, t, s, Y, A, P, Q)

    sign = cp.cost_sign()

    def g(t, *y):
        return sign * np.asarray(cp.g(t, *y), dtype=float)

    g_t = None
    if cp.g_t is not None:
        def g_t(t, *y):
            return sign * np.asarray(cp.g_t(t, *y), dtype=float)

    return NonlinearProblem(F=F, g=g, g_t=g_t, d=d)


def _diffusion_precheck(cp: ControlProblem, grid: TriangleGrid, t0: float):
    """Name the controls for which ``sigma sigma^T`` degenerates."""
    if cp.bounds is None:
        return
    axes = _control_axes(cp)
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, cp.m)
    s = (t0 + grid.tau).reshape((-1,) + (1,) * grid.d)
    Y = grid.coordinates(lead=1)
    bad = []
    for point in points:
        A = point.reshape((cp.m,) + (1,) * (grid.d + 1))
        sig = _call_sigma(cp, s, Y, A)
        ss = np.einsum("ik...,jk...->ij...", sig, sig)
        if np.min(min_eigenvalue(ss)) <= 0.0:
            bad.append(point)
    if bad:
        bad = np.array(bad)
        region = ", ".join(f"a{i + 1} in [{bad[:, i].min():.4g}, {bad[:, i].max():.4g}]" for i in range(cp.m))
        raise ModelError(
            f"uniform ellipticity condition violated: sigma sigma^T is degenerate for controls with {region}"
        )


def solve_equilibrium_hjb(
    cp: ControlProblem,
    grid: TriangleGrid,
    tol: float = 1e-8,
    max_iter: int = 200,
    contraction_cap: float = 0.9,
    theta: float = 0.5,
    initial_window: int | None = None,
) -> EquilibriumPolicy:
    """Solve the equilibrium HJB equation on ``[T - grid.T, T]``.

    Returns the policy on the diagonal, the value and the full backward field.
    """
    if grid.d != cp.d:
        raise ArgumentError(f"grid dimension {grid.d} does not match the control problem ({cp.d})")
    if grid.T > cp.T + 1e-12:
        raise ArgumentError(f"grid horizon {grid.T} exceeds the control horizon {cp.T}")
    t0 = cp.T - grid.T
    _diffusion_precheck(cp, grid, t0)
    back = backward_problem(cp)
    fwd = time_reverse(back, cp.T)
    try:
        sol = solve_nonlinear(fwd, grid, tol, max_iter, contraction_cap, theta, initial_window=initial_window)
    except ModelError as exc:
        raise ModelError(f"{exc} (induced by the control problem's diffusion sigma sigma^T)") from exc
    N = grid.n_time
    diag = restrict_diagonal(sol.u).values  # diag[i'] = u(T - tau_i', T - tau_i')
    v = diag[::-1].copy()
    s = t0 + grid.tau
    D = v[None]
    Mv = gradient(D, grid.d, grid.dy)[:, 0]
    Nv = hessian(D, grid.d, grid.dy)[:, :, 0]
    sa = s.reshape((N,) + (1,) * grid.d)
    Y = grid.coordinates(lead=1)
    e = _argmin(cp, sa, sa, Y, Mv, Nv)
    u_back = np.zeros(grid.shape)
    fu = sol.u.values
    for i in range(N):
        u_back[i, i:] = fu[N - 1 - i, : N - i][::-1]
    return EquilibriumPolicy(
        s=s, e=_unstack(e, cp.m), v=v, u=u_back, forward=sol, problem=cp, grid=grid, t0=t0,
        report=sol.report.to_dict(),
    )


def verify_hjb_system(policy: EquilibriumPolicy, cp: ControlProblem | None = None) -> tuple[float, float]:
    """Residuals of the HJB system on the grid.

    ``res1`` checks ``u_s(s, s, y) + min_a H(s, s, y, a, v_y, v_yy) = 0`` on
    the diagonal and ``res2`` checks ``u_s + H(t, s, y, e(s, y), u_y, u_yy) = 0``
    everywhere, with one-sided s-differences.
    """
    cp = cp or policy.problem
    g = policy.grid
    N, d, dy = g.n_time, g.d, g.dy
    fu = policy.forward.u.values
    # forward frame: t' = T - t, s' = T - s, so u_s = -D_{s'} u'
    Ds = -s_difference(fu, g.dt, scheme="forward")
    P = gradient(fu, d, dy)
    Q = hessian(fu, d, dy)
    tp = (cp.T - g.tau).reshape((N, 1) + (1,) * d)
    sp_ = (cp.T - g.tau).reshape((1, N) + (1,) * d)
    Y = g.coordinates(lead=2)
    e_rev = _stack(policy.e, cp.m)[:, ::-1]  # e at s' order
    A = e_rev[:, None]
    H = _H(cp, tp, sp_, Y, A, P, Q)
    mask = np.broadcast_to(g.tri_mask(), g.shape).copy()
    mask[0] = False
    r2 = np.abs(Ds + H)
    res2 = float(r2[mask].max()) if mask.any() else 0.0
    idx = np.arange(N)
    diag = fu[idx, idx]
    Mv = gradient(diag[None], d, dy)[:, 0]
    Nv = hessian(diag[None], d, dy)[:, :, 0]
    s_diag = (cp.T - g.tau).reshape((N,) + (1,) * d)
    Ad = _argmin(cp, s_diag, s_diag, g.coordinates(lead=1), Mv, Nv, warn=False)
    Hd = _H(cp, s_diag, s_diag, g.coordinates(lead=1), Ad, Mv, Nv)
    r1 = np.abs(Ds[idx, idx] + Hd)[1:]
    res1 = float(r1.max()) if r1.size else 0.0
    return res1, res2


def classical_hjb_policy(
    cp: ControlProblem,
    grid: TriangleGrid,
    tol: float = 1e-10,
    max_iter: int = 100,
    theta: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Local HJB ``V_s + min_a H(s, s, y, a, V_y, V_yy) = 0`` by policy iteration.

    Each policy is evaluated with the local theta-scheme; returns ``(V, e)``
    on the s-nodes of ``[T - grid.T, T]`` in increasing order.
    """
    N, d, dy = grid.n_time, grid.d, grid.dy
    t0 = cp.T - grid.T
    s_rev = (cp.T - grid.tau).reshape((N,) + (1,) * d)  # s at reversed level j
    Y = grid.coordinates(lead=1)
    sign = cp.cost_sign()
    V0 = sign * np.asarray(np.broadcast_to(cp.g(cp.T, *grid.lattice()), grid.space_shape), dtype=float)
    V = np.broadcast_to(V0, (N,) + grid.space_shape).copy()
    A = None
    for _ in range(max_iter):
        Mv = gradient(V, d, dy)
        Nv = hessian(V, d, dy)
        A_new = _argmin(cp, s_rev, s_rev, Y, Mv, Nv, warn=False)
        if A is not None and np.max(np.abs(A_new - A)) <= tol:
            A = A_new
            break
        A = A_new
        sig = _call_sigma(cp, s_rev, Y, A)
        diff = 0.5 * np.einsum("ik...,jk...->ij...", sig, sig)
        drift = _call_b(cp, s_rev, Y, A)
        cost = sign * np.asarray(cp.h(s_rev, s_rev, _unstack(Y, d), _unstack(A, cp.m)), dtype=float)
        ops = LocalOperatorSlice(diff, drift, np.zeros(()), np.broadcast_to(cost, (N,) + grid.space_shape))
        V = solve_parameterized_local(ops, V0, N - 1, grid.dt, dy, theta)
    e = _unstack(A, cp.m)
    return V[::-1].copy(), (e[::-1] if cp.m == 1 else e[:, ::-1]).copy()
