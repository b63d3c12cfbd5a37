"""Fully nonlinear nonlocal equations ``u_s = F(t, s, y, u, u_y, u_yy, u(s,s), u_y(s,s), u_yy(s,s))``.

The nonlinear problem is reduced to a sequence of linear ones.  The first
derivatives of F, frozen at an anchor built from the initial rows of the
current window, give a nonlocal linear operator ``L``.  For a guess ``u``
the map ``lambda`` solves ``U_s = L U + F(u) - L u`` with the linear
machinery; its fixed point solves the nonlinear equation.

Argument conventions for ``F`` and its derivative closures: ``t, s, u, l``
are arrays; for ``d = 1`` so are ``y, p, q, m, n``.  For ``d = 2`` the
vector arguments carry a leading component axis and the matrix arguments
two of them.  ``F_p``/``F_m`` and ``F_q``/``F_n`` return arrays with the
same leading axes.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ArgumentError, ConvergenceError
from .grid import TriangleGrid, TriField, axis_difference, gradient, hessian, s_difference
from .linear import (
    LinearCoefficients,
    LinearSolution,
    SampledCoefficients,
    SolverReport,
    _Engine,
    _sample_initial,
    march_region,
    solve_region,
)
from .local import check_ellipticity, min_eigenvalue
from .norms import HolderConfig, tri_norms, tri_norms_array

SLOTS = ("u", "p", "q", "l", "m", "n")
_KIND = {"u": 0, "l": 0, "p": 1, "m": 1, "q": 2, "n": 2}


@dataclass
class NonlinearProblem:
    """Right-hand side ``F`` with optional derivative closures and initial data.

    ``g`` and ``g_t`` are numbers or callables ``fn(t, *y)``.  Missing
    derivatives of F are replaced by central differences with step
    ``h_F * max(1, |x|)``.
    """

    F: Callable
    g: Any = 0.0
    g_t: Any = None
    d: int = 1
    F_u: Callable | None = None
    F_p: Callable | None = None
    F_q: Callable | None = None
    F_l: Callable | None = None
    F_m: Callable | None = None
    F_n: Callable | None = None
    F_t: Callable | None = None
    h_F: float = 1e-5

    def closure(self, name: str):
        return getattr(self, f"F_{name}")


@dataclass
class AnchorLinearization:
    """Frozen first derivatives of F on the rows ``start <= i < n_time``.

    Coefficient arrays have the component axes first, then a row axis of
    length ``n_time - start`` and the spatial axes.  They do not depend on s.
    """

    grid: TriangleGrid
    start: int
    a: np.ndarray
    abar: np.ndarray
    b: np.ndarray
    bbar: np.ndarray
    c: np.ndarray
    cbar: np.ndarray
    a_t: np.ndarray
    abar_t: np.ndarray
    b_t: np.ndarray
    bbar_t: np.ndarray
    c_t: np.ndarray
    cbar_t: np.ndarray
    anchor: dict = field(default_factory=dict)
    ellipticity: float = 0.0

    def rows(self, name: str, r0: int, r1: int) -> np.ndarray:
        """Coefficient ``name`` on absolute rows ``r0:r1`` with an s axis of length one."""
        arr = getattr(self, name)
        lead = _KIND_OF_COEF[name.removesuffix("_t")]
        sel = arr[(slice(None),) * lead + (slice(r0 - self.start, r1 - self.start),)]
        return np.expand_dims(sel, lead + 1)


_KIND_OF_COEF = {"a": 2, "abar": 2, "b": 1, "bbar": 1, "c": 0, "cbar": 0}
_COEF_OF_SLOT = {"q": "a", "p": "b", "u": "c", "n": "abar", "m": "bbar", "l": "cbar"}


# -- evaluation of F and its derivatives ------------------------------------------


class _State:
    """Argument arrays in component-first form with a common base shape."""

    def __init__(self, t, s, Y, u, P, Q, l, M, N, base):
        self.t, self.s, self.Y = t, s, Y
        self.vals = {"u": u, "p": P, "q": Q, "l": l, "m": M, "n": N}
        self.base = base

    def replace(self, **kw):
        new = _State(self.t, self.s, self.Y, *(self.vals[k] for k in SLOTS), self.base)
        for k, v in kw.items():
            if k == "t":
                new.t = v
            else:
                new.vals[k] = v
        return new


class FEvaluator:
    """Uniform access to F and its first derivatives for a problem."""

    def __init__(self, prob: NonlinearProblem):
        if prob.d not in (1, 2):
            raise ArgumentError(f"unsupported dimension {prob.d}")
        self.prob = prob
        self.d = prob.d

    def _pack(self, arr, kind):
        if self.d == 1 and kind:
            return arr[(0,) * kind]
        return arr

    def _unpack(self, out, kind, base):
        if kind and self.d > 1 and isinstance(out, (list, tuple)):
            # components may mix scalars and arrays
            out = [self._unpack(x, kind - 1, base) for x in out]
            return np.stack(out)
        out = np.asarray(out, dtype=float)
        if self.d == 1 and kind:
            out = out[(None,) * kind]
        return np.broadcast_to(out, (self.d,) * kind + base)

    def _args(self, st: _State):
        v = st.vals
        return (
            st.t, st.s, self._pack(st.Y, 1),
            v["u"], self._pack(v["p"], 1), self._pack(v["q"], 2),
            v["l"], self._pack(v["m"], 1), self._pack(v["n"], 2),
        )

    def value(self, st: _State) -> np.ndarray:
        with np.errstate(all="ignore"):
            out = self.prob.F(*self._args(st))
        return self._unpack(out, 0, st.base)

    @staticmethod
    def _step(x, h):
        return h * np.maximum(1.0, np.abs(x))

    def _fd_scalar(self, st, name, comp=None):
        h = self.prob.h_F
        if name == "t":
            x = np.asarray(st.t, dtype=float)
            hx = self._step(x, h)
            plus = self.value(st.replace(t=x + hx))
            minus = self.value(st.replace(t=x - hx))
            return (plus - minus) / (2.0 * hx)
        arr = np.asarray(st.vals[name], dtype=float)
        kind = _KIND[name]
        if kind == 0:
            hx = self._step(arr, h)
            plus = self.value(st.replace(**{name: arr + hx}))
            minus = self.value(st.replace(**{name: arr - hx}))
            return (plus - minus) / (2.0 * hx)
        if kind == 1:
            (k,) = comp
            hx = self._step(arr[k], h)
            ap, am = arr.copy(), arr.copy()
            ap[k] += hx
            am[k] -= hx
            return (self.value(st.replace(**{name: ap})) - self.value(st.replace(**{name: am}))) / (2.0 * hx)
        k, l = comp
        hx = self._step(arr[k, l], h)
        ap, am = arr.copy(), arr.copy()
        ap[k, l] += hx
        am[k, l] -= hx
        if k != l:
            # keep the matrix symmetric; the result is split over both entries
            ap[l, k] += hx
            am[l, k] -= hx
        diff = (self.value(st.replace(**{name: ap})) - self.value(st.replace(**{name: am}))) / (2.0 * hx)
        return diff if k == l else 0.5 * diff

    def derivative(self, st: _State, name: str) -> np.ndarray:
        """``dF/d(name)`` for ``name`` in ``t, u, p, q, l, m, n``."""
        kind = 0 if name == "t" else _KIND[name]
        closure = self.prob.closure(name)
        if closure is not None:
            with np.errstate(all="ignore"):
                out = closure(*self._args(st))
            return np.array(self._unpack(out, kind, st.base))
        d = self.d
        if kind == 0:
            return np.array(np.broadcast_to(self._fd_scalar(st, name), st.base))
        if kind == 1:
            return np.stack([np.broadcast_to(self._fd_scalar(st, name, (k,)), st.base) for k in range(d)])
        out = np.empty((d, d) + st.base)
        for k in range(d):
            for l in range(k, d):
                out[k, l] = self._fd_scalar(st, name, (k, l))
                out[l, k] = out[k, l]
        return out


def _state_from(fe, grid, t, s, u, P, Q, l, M, N):
    d = grid.d
    base = np.broadcast_shapes(np.shape(t), np.shape(s), np.shape(u), np.shape(l), P.shape[1:], M.shape[1:])
    Y = grid.coordinates(lead=len(base) - d)
    return _State(t, s, Y, u, P, Q, l, M, N, base)


def _region_state(fe, grid, values, r0, c0):
    """State of a region ``values[r, c] = u(t_{r0+r}, s_{c0+c})`` whose diagonal
    entries (absolute ``i == j``) are available inside ``values``."""
    d, dy = grid.d, grid.dy
    R, M = values.shape[:2]
    pad = (1,) * d
    t = grid.tau[r0 : r0 + R].reshape((R, 1) + pad)
    s = grid.tau[c0 : c0 + M].reshape((1, M) + pad)
    P = gradient(values, d, dy)
    Q = hessian(values, d, dy)
    return t, s, P, Q


def _diag_triple(diag, grid):
    d, dy = grid.d, grid.dy
    D = diag[None]
    return D, gradient(D, d, dy), hessian(D, d, dy)


def _locator(grid, row0):
    def locate(where):
        i = where[0] + row0
        ys = ", ".join(f"{grid.y[k]:.4g}" for k in where[1:])
        return f"anchor node t={grid.tau[i]:.4g}, y=({ys})"

    return locate


def _initial_rows(prob: NonlinearProblem, grid: TriangleGrid):
    return _sample_initial(prob.g, prob.g_t, grid)


def anchor_linearization(
    prob: NonlinearProblem,
    grid: TriangleGrid,
    start: int = 0,
    rows: np.ndarray | None = None,
) -> AnchorLinearization:
    """Freeze the first derivatives of F at the anchor of a window.

    The anchor for row ``t_i`` is ``(t_i, s_start, y, w, w_y, w_yy, w0, w0_y,
    w0_yy)`` with ``w = rows[i]`` the data ``u(t_i, s_start, .)`` and ``w0``
    its value on the diagonal.  By default ``start = 0`` and ``rows = g``.
    """
    fe = prob if isinstance(prob, FEvaluator) else FEvaluator(prob)
    if fe.d != grid.d:
        raise ArgumentError(f"problem dimension {fe.d} does not match grid dimension {grid.d}")
    N = grid.n_time
    if not 0 <= start < N:
        raise ArgumentError(f"anchor start {start} outside the grid")
    if rows is None:
        if start != 0:
            raise ArgumentError("anchor rows are required when the window does not start at s=0")
        rows = _initial_rows(fe.prob, grid)[0]
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] == N and start > 0:
        rows = rows[start:]
    if rows.shape != (N - start,) + grid.space_shape:
        raise ArgumentError(f"anchor rows have shape {rows.shape}, expected {(N - start,) + grid.space_shape}")
    d, dy = grid.d, grid.dy
    R = rows.shape[0]
    t = grid.tau[start:].reshape((R,) + (1,) * d)
    s = np.asarray(grid.tau[start])
    P, Q = gradient(rows, d, dy), hessian(rows, d, dy)
    l = rows[0][None]
    Ml, Nl = gradient(l, d, dy), hessian(l, d, dy)
    st = _state_from(fe, grid, t, s, rows, P, Q, l, Ml, Nl)
    coef = {_COEF_OF_SLOT[name]: fe.derivative(st, name) for name in SLOTS}
    loc = _locator(grid, start)
    lam1 = check_ellipticity(coef["a"], "dF/dq (local part)", loc)
    lam2 = check_ellipticity(coef["a"] + coef["abar"], "dF/dq + dF/dn (local plus diagonal part)", loc)
    order = 2 if R >= 3 else 1
    derivs = {}
    for name, arr in coef.items():
        lead = _KIND_OF_COEF[name]
        derivs[name + "_t"] = axis_difference(arr, grid.dt, axis=lead, order=order) if R > 1 else np.zeros_like(arr)
    anchor = {"t": grid.tau[start:].copy(), "s": float(grid.tau[start]), "u": rows.copy(), "l": rows[0].copy()}
    return AnchorLinearization(grid, start, **coef, **derivs, anchor=anchor, ellipticity=min(lam1, lam2))


def _contract(coef, deriv, kind):
    if kind == 0:
        return coef * deriv
    if kind == 1:
        return np.einsum("k...,k...->...", coef, deriv)
    return np.einsum("kl...,kl...->...", coef, deriv)


# -- the lambda map ---------------------------------------------------------------


@dataclass
class _Ctx:
    fe: FEvaluator
    grid: TriangleGrid
    theta: float
    cfg: HolderConfig
    inner_tol: float
    max_iter: int
    cap: float


def _sources(ctx: _Ctx, anchors: AnchorLinearization, uk, vk, st, en):
    """Source ``phi = F(u) - L u`` and its t-derivative on the window region."""
    grid, fe = ctx.grid, ctx.fe
    idx = np.arange(en - st + 1)
    t, s, P, Q = _region_state(fe, grid, uk, st, st)
    D0, D1, D2 = _diag_triple(uk[idx, idx], grid)
    state = _state_from(fe, grid, t, s, uk, P, Q, D0, D1, D2)
    F = fe.value(state)
    Ft = fe.derivative(state, "t")
    Fu, Fp, Fq = fe.derivative(state, "u"), fe.derivative(state, "p"), fe.derivative(state, "q")
    d = grid.d
    Vp, Vq = gradient(vk, d, grid.dy), hessian(vk, d, grid.dy)
    arg = {"u": uk, "p": P, "q": Q, "l": D0, "m": D1, "n": D2}
    Lu = 0.0
    Lt = 0.0
    for slot, name in _COEF_OF_SLOT.items():
        kind = _KIND[slot]
        cf = anchors.rows(name, st, en + 1)
        cf_t = anchors.rows(name + "_t", st, en + 1)
        Lu = Lu + _contract(cf, arg[slot], kind)
        Lt = Lt + _contract(cf_t, arg[slot], kind)
    # t-derivative of the local part of L u (anchor coefficients times v)
    Lt = Lt + _contract(anchors.rows("a", st, en + 1), Vq, 2) + _contract(anchors.rows("b", st, en + 1), Vp, 1)
    Lt = Lt + anchors.rows("c", st, en + 1) * vk
    phi = F - Lu
    phi_t = Ft + Fu * vk + _contract(Fp, Vp, 1) + _contract(Fq, Vq, 2) - Lt
    return phi, phi_t


def _full(grid, region, st, en, lead=()):
    """Place a region array into a zero full-grid array."""
    out = np.zeros(lead + grid.shape)
    out[(Ellipsis, slice(st, en + 1), slice(st, en + 1)) + (slice(None),) * grid.d] = region
    return out


def _pad_rows(arr, start, lead, N):
    """Extend a rows-from-``start`` coefficient to all ``N`` rows and add an s axis."""
    if start > 0:
        first = arr[(slice(None),) * lead + (slice(0, 1),)]
        arr = np.concatenate([np.repeat(first, start, axis=lead), arr], axis=lead)
    arr = np.expand_dims(arr, lead + 1)
    shape = list(arr.shape)
    shape[lead + 1] = N
    return np.broadcast_to(arr, tuple(shape))


def _sampled(ctx: _Ctx, anchors: AnchorLinearization, phi, phi_t, st, en):
    g = ctx.grid
    N = g.n_time
    parts = {}
    for name, lead in _KIND_OF_COEF.items():
        parts[name] = _pad_rows(getattr(anchors, name), anchors.start, lead, N)
        parts[name + "_t"] = _pad_rows(getattr(anchors, name + "_t"), anchors.start, lead, N)
    zeros = np.zeros((N,) + g.space_shape)
    return SampledCoefficients(
        g, parts["a"], parts["abar"], parts["b"], parts["bbar"], parts["c"], parts["cbar"],
        _full(g, phi, st, en), parts["a_t"], parts["abar_t"], parts["b_t"], parts["bbar_t"],
        parts["c_t"], parts["cbar_t"], _full(g, phi_t, st, en), zeros, zeros,
    )


def _lambda_region(ctx: _Ctx, anchors, uk, vk, u_rows, v_rows, st, en, report: SolverReport):
    """Apply lambda on the window ``[st, en]``; returns the region pair."""
    phi, phi_t = _sources(ctx, anchors, uk, vk, st, en)
    C = _sampled(ctx, anchors, phi, phi_t, st, en)
    engine = _Engine(C, ctx.theta, ctx.cfg)
    g = ctx.grid
    u = np.zeros(g.shape)
    v = np.zeros(g.shape)
    u[st : en + 1, st] = u_rows
    v[st : en + 1, st] = v_rows
    solve_region(engine, u, v, st, en, ctx.inner_tol, ctx.max_iter, ctx.cap, report, seed=vk)
    return u[st : en + 1, st : en + 1], v[st : en + 1, st : en + 1]


def _tri(arr):
    n = arr.shape[0]
    m = np.tri(n, dtype=bool).reshape((n, n) + (1,) * (arr.ndim - 2))
    return np.where(m, arr, 0.0)


def lambda_map(
    u_in: TriField,
    v_in: TriField,
    prob: NonlinearProblem,
    anchors: AnchorLinearization | None = None,
    window: tuple[int, int] | None = None,
    tol: float = 1e-9,
    theta: float = 0.5,
    max_iter: int = 200,
    contraction_cap: float = 0.9,
    norm_cfg: HolderConfig | None = None,
) -> tuple[TriField, TriField]:
    """One application of the nonlinear contraction map.

    Entries outside the window triangle are copied from the inputs.  The
    window's first column ``u_in[:, start]`` supplies the initial rows and
    defaults the anchor.
    """
    grid = u_in.grid
    if v_in.grid != grid:
        raise ArgumentError("u_in and v_in live on different grids")
    N = grid.n_time
    st, en = (0, N - 1) if window is None else window
    if not 0 <= st < en <= N - 1:
        raise ArgumentError(f"invalid window {window}")
    fe = FEvaluator(prob)
    if st == 0:
        g, _ = _initial_rows(prob, grid)
        scale = max(1.0, float(np.abs(g).max()))
        if np.abs(u_in.values[:, 0] - g).max() > 1e-12 * scale:
            raise ArgumentError("u_in does not satisfy the initial row u(t, 0, y) = g(t, y)")
    if anchors is None:
        anchors = anchor_linearization(fe, grid, st, u_in.values[st:, st])
    ctx = _Ctx(fe, grid, theta, norm_cfg or HolderConfig(), tol, max_iter, contraction_cap)
    uk = _tri(u_in.values[st : en + 1, st : en + 1])
    vk = _tri(v_in.values[st : en + 1, st : en + 1])
    U, V = _lambda_region(ctx, anchors, uk, vk, uk[:, 0], vk[:, 0], st, en, SolverReport())
    u_out = np.array(u_in.values)
    v_out = np.array(v_in.values)
    u_out[st : en + 1, st : en + 1] = np.where(_tri_mask(U), U, u_out[st : en + 1, st : en + 1])
    v_out[st : en + 1, st : en + 1] = np.where(_tri_mask(V), V, v_out[st : en + 1, st : en + 1])
    return TriField(grid, u_out), TriField(grid, v_out)


def _tri_mask(arr):
    n = arr.shape[0]
    return np.tri(n, dtype=bool).reshape((n, n) + (1,) * (arr.ndim - 2))


# -- the outer iteration ----------------------------------------------------------


def _picard_lambda(ctx: _Ctx, anchors, u, v, st, en, tol, report: SolverReport):
    M = en - st + 1
    u_rows = u[st : en + 1, st]
    v_rows = v[st : en + 1, st]
    uk = _tri(np.broadcast_to(u_rows[:, None], (M, M) + u_rows.shape[1:]).copy())
    vk = _tri(np.broadcast_to(v_rows[:, None], (M, M) + v_rows.shape[1:]).copy())
    incs, factors = [], []
    stalled = 0
    status = "max_iter"
    inner = SolverReport()
    g = ctx.grid
    for _ in range(ctx.max_iter):
        try:
            U, V = _lambda_region(ctx, anchors, uk, vk, u_rows, v_rows, st, en, inner)
        except ConvergenceError:
            status = "inner_failure"
            break
        inc = tri_norms_array(U - uk, g.dt, g.dy, g.d, ctx.cfg, order=0, V=V - vk).double_bracket
        if not np.isfinite(inc):
            status = "diverged"
            break
        if incs:
            fac = inc / incs[-1] if incs[-1] > 0 else 0.0
            factors.append(fac)
            stalled = stalled + 1 if fac >= ctx.cap else 0
        incs.append(inc)
        uk, vk = U, V
        if inc <= tol:
            status = "converged"
            break
        if stalled >= 3:
            status = "stalled"
            break
    log = {
        "start": int(st), "end": int(en), "iterations": len(incs),
        "factors": [float(x) for x in factors], "final_increment": float(incs[-1]) if incs else float("nan"),
        "accepted": status == "converged", "status": status, "inner_iterations": inner.iterations,
    }
    return uk, vk, log


def _extend_rows(ctx: _Ctx, anchors, u, v, st, en, tol):
    """Advance rows ``t > t_en`` across ``[s_st, s_en]`` with the diagonal known."""
    g, fe = ctx.grid, ctx.fe
    N = g.n_time
    if en >= N - 1:
        return
    d = g.d
    R, M = N - 1 - en, en - st + 1
    idx = np.arange(st, en + 1)
    D0, D1, D2 = _diag_triple(u[idx, idx], g)
    pad = (1,) * d
    t = g.tau[en + 1 :].reshape((R, 1) + pad)
    s = g.tau[st : en + 1].reshape((1, M) + pad)
    A = anchors.rows("a", en + 1, N)
    B = anchors.rows("b", en + 1, N)
    Cr = anchors.rows("c", en + 1, N)
    u0 = u[en + 1 :, st]
    w = np.broadcast_to(u0[:, None], (R, M) + u0.shape[1:]).copy()
    for _ in range(ctx.max_iter):
        P, Q = gradient(w, d, g.dy), hessian(w, d, g.dy)
        state = _state_from(fe, g, t, s, w, P, Q, D0, D1, D2)
        phi = fe.value(state) - (_contract(A, Q, 2) + _contract(B, P, 1) + Cr * w)
        W = march_region(A, B, Cr, phi, u0, False, g.dt, g.dy, ctx.theta)
        inc = float(np.abs(W - w).max())
        w = W
        if not np.isfinite(inc):
            break
        if inc <= tol:
            break
    else:
        inc = float("inf")
    if not inc <= tol:
        raise ConvergenceError(
            f"row extension across window [{st}, {en}] did not converge (last increment {inc:.3e})"
        )
    P, Q = gradient(w, d, g.dy), hessian(w, d, g.dy)
    state = _state_from(fe, g, t, s, w, P, Q, D0, D1, D2)
    Fq = fe.derivative(state, "q")
    check_ellipticity(Fq, "dF/dq (local part)")
    V = march_region(
        Fq, fe.derivative(state, "p"), fe.derivative(state, "u"), fe.derivative(state, "t"),
        v[en + 1 :, st], False, g.dt, g.dy, ctx.theta,
    )
    u[en + 1 :, st : en + 1] = w
    v[en + 1 :, st : en + 1] = V


def solve_nonlinear(
    prob: NonlinearProblem,
    grid: TriangleGrid,
    tol: float = 1e-8,
    max_iter: int = 200,
    contraction_cap: float = 0.9,
    theta: float = 0.5,
    norm_cfg: HolderConfig | None = None,
    initial_window: int | None = None,
    inner_tol: float | None = None,
) -> LinearSolution:
    """Picard iteration on the lambda map with adaptive window halving.

    Each window is anchored at its own initial rows (for the first window
    these are ``g``), so later windows linearize around the running solution.
    """
    t0 = time.perf_counter()
    if tol <= 0:
        raise ArgumentError("tolerance must be positive")
    fe = FEvaluator(prob)
    if fe.d != grid.d:
        raise ArgumentError(f"problem dimension {fe.d} does not match grid dimension {grid.d}")
    ctx = _Ctx(fe, grid, theta, norm_cfg or HolderConfig(), inner_tol or tol / 10.0, max_iter, contraction_cap)
    N = grid.n_time
    u = np.zeros(grid.shape)
    v = np.zeros(grid.shape)
    g, g_t = _initial_rows(prob, grid)
    u[:, 0], v[:, 0] = g, g_t
    report = SolverReport()
    lams = []
    st = 0
    while st < N - 1:
        anchors = anchor_linearization(fe, grid, st, u[st:, st])
        lams.append(anchors.ellipticity)
        hi = N - 1 if initial_window is None else min(N - 1, st + initial_window)
        while True:
            U, V, log = _picard_lambda(ctx, anchors, u, v, st, hi, tol, report)
            report.windows.append(log)
            report.iterations += log["iterations"]
            if log["accepted"]:
                break
            if hi - st <= 1:
                report.converged = False
                raise ConvergenceError(
                    f"nonlinear Picard iteration did not converge on the minimal window [{st}, {hi}] "
                    f"(status {log['status']}, last increment {log['final_increment']:.3e})",
                    report,
                )
            hi = st + (hi - st) // 2
        m = _tri_mask(U)
        u[st : hi + 1, st : hi + 1] = np.where(m, U, u[st : hi + 1, st : hi + 1])
        v[st : hi + 1, st : hi + 1] = np.where(m, V, v[st : hi + 1, st : hi + 1])
        report.subintervals.append((st, hi))
        report.contraction_factors.extend(log["factors"])
        report.final_increment = max(report.final_increment, log["final_increment"])
        _extend_rows(ctx, anchors, u, v, st, hi, ctx.inner_tol)
        st = hi
    report.ellipticity = float(min(lams)) if lams else None
    Uf, Vf = TriField(grid, u), TriField(grid, v)
    report.norm_snapshot = tri_norms(Uf, Vf, ctx.cfg)
    report.wall_time = time.perf_counter() - t0
    return LinearSolution(Uf, Vf, report)


# -- diagnostics ------------------------------------------------------------------


def evaluate_F_field(u: np.ndarray, prob: NonlinearProblem, grid: TriangleGrid) -> np.ndarray:
    """``F`` at every node of a triangle array (diagonal terms from ``u``'s diagonal)."""
    fe = FEvaluator(prob)
    N = grid.n_time
    t, s, P, Q = _region_state(fe, grid, u, 0, 0)
    idx = np.arange(N)
    D0, D1, D2 = _diag_triple(u[idx, idx], grid)
    return fe.value(_state_from(fe, grid, t, s, u, P, Q, D0, D1, D2))


def residual_nonlinear(u: TriField, prob: NonlinearProblem) -> float:
    """Max of ``|D_s u - F(...)|`` with forward s-differences (backward on the diagonal)."""
    grid = u.grid
    Ds = s_difference(u.values, grid.dt, scheme="forward")
    F = evaluate_F_field(u.values, prob, grid)
    mask = np.broadcast_to(grid.tri_mask(), grid.shape).copy()
    mask[0] = False
    res = np.abs(Ds - F)
    return float(res[mask].max()) if mask.any() else 0.0


@dataclass
class RegularityReport:
    samples: int
    radius: float
    lipschitz: dict
    holder: dict
    derivative_lipschitz: dict
    growth: dict
    unbounded_growth: list
    min_eig_local: float
    min_eig_combined: float
    ellipticity_ok: bool
    flags: list

    def to_dict(self) -> dict:
        return asdict(self)


def _random_state(fe, grid, rng, n, radius):
    d = grid.d
    T = grid.T
    t = rng.uniform(0.0, T, n)
    s = rng.uniform(0.0, 1.0, n) * t
    Y = rng.uniform(0.0, grid.L, (d, n))

    def sym(shape):
        a = rng.uniform(-radius, radius, shape)
        return 0.5 * (a + np.swapaxes(a, 0, 1))

    vals = dict(
        u=rng.uniform(-radius, radius, n), p=rng.uniform(-radius, radius, (d, n)), q=sym((d, d, n)),
        l=rng.uniform(-radius, radius, n), m=rng.uniform(-radius, radius, (d, n)), n=sym((d, d, n)),
    )
    st = _State(t, s, Y, *(vals[k] for k in SLOTS), (n,))
    return st


def _perturb(st: _State, rng, radius, slots):
    """Random perturbation of the given slots; returns (new state, distance)."""
    n = st.base[0]
    scale = radius * 10.0 ** rng.uniform(-4.0, 0.0, n)
    dist2 = np.zeros(n)
    new = st.replace()
    for slot in slots:
        if slot in ("t", "s"):
            arr = getattr(st, slot)
            delta = scale * rng.choice([-1.0, 1.0], n)
            setattr(new, slot, arr + delta)
        elif slot == "y":
            delta = scale * rng.standard_normal(st.Y.shape) / np.sqrt(st.Y.shape[0])
            new.Y = st.Y + delta
            dist2 += (delta**2).sum(axis=0)
            continue
        else:
            arr = st.vals[slot]
            kind = _KIND[slot]
            if kind == 0:
                delta = scale * rng.choice([-1.0, 1.0], n)
            elif kind == 1:
                delta = scale * rng.standard_normal(arr.shape) / np.sqrt(arr.shape[0])
            else:
                raw = rng.standard_normal(arr.shape)
                raw = 0.5 * (raw + np.swapaxes(raw, 0, 1))
                delta = scale * raw / np.sqrt((raw**2).sum(axis=(0, 1)))
            new.vals[slot] = arr + delta
        dist2 += (delta**2).reshape(-1, n).sum(axis=0)
    return new, np.sqrt(dist2)


def _family(fe, st, name):
    return fe.value(st) if name == "F" else fe.derivative(st, name)


def check_regularity(
    prob: NonlinearProblem,
    grid: TriangleGrid,
    samples: int = 512,
    seed: int = 0,
    radius: float = 1.0,
    alpha: float = 0.5,
) -> RegularityReport:
    """Sampled continuity and ellipticity diagnostics for ``F``.

    Lipschitz constants per argument slot come from difference quotients of
    random argument pairs (perturbation sizes spread over four decades).  The
    first derivatives are checked jointly in all arguments.  Growth is
    flagged when an estimate at ``4 * radius`` exceeds twice the one at
    ``radius``.
    """
    fe = FEvaluator(prob)
    rng = np.random.default_rng(seed)

    def lipschitz_of(name, slots, rad):
        st = _random_state(fe, grid, rng, samples, rad)
        new, dist = _perturb(st, rng, rad, slots)
        with np.errstate(all="ignore"):
            diff = np.abs(_family(fe, new, name) - _family(fe, st, name))
        diff = diff.reshape(-1, samples).max(axis=0) if diff.ndim > 1 else diff
        q = diff / dist
        return float(np.nanmax(q)) if np.any(np.isfinite(q)) else float("inf")

    lip = {slot: lipschitz_of("F", [slot], radius) for slot in SLOTS}
    all_slots = list(SLOTS) + ["y"]
    lip["all"] = lipschitz_of("F", all_slots, radius)
    holder = {}
    for slot in ("t", "s", "y"):
        st = _random_state(fe, grid, rng, samples, radius)
        new, _ = _perturb(st, rng, radius, [slot])
        if slot == "y":
            dist = np.sqrt(((new.Y - st.Y) ** 2).sum(axis=0))
        else:
            dist = np.abs(getattr(new, slot) - getattr(st, slot))
        diff = np.abs(fe.value(new) - fe.value(st))
        holder[slot] = float(np.max(diff / dist**alpha))
    dlip = {f"F_{k}": lipschitz_of(k, all_slots, radius) for k in SLOTS}
    growth = {}
    unbounded = []
    for name in ["F"] + list(SLOTS):
        key = "F" if name == "F" else f"F_{name}"
        near = lip["all"] if name == "F" else dlip[key]
        far = lipschitz_of(name, all_slots, 4.0 * radius)
        growth[key] = far
        if far > 2.0 * near + 1e-8:
            unbounded.append(key)
    st = _random_state(fe, grid, rng, samples, radius)
    Fq = fe.derivative(st, "q")
    Fn = fe.derivative(st, "n")
    e1 = float(np.min(min_eigenvalue(Fq)))
    e2 = float(np.min(min_eigenvalue(Fq + Fn)))
    flags = []
    if not e1 > 0:
        flags.append("local ellipticity violated: dF/dq not positive definite")
    if not e2 > 0:
        flags.append("combined ellipticity violated: dF/dq + dF/dn not positive definite")
    flags.extend(f"unbounded growth of {k}" for k in unbounded)
    return RegularityReport(
        samples=samples, radius=radius, lipschitz=lip, holder=holder, derivative_lipschitz=dlip,
        growth=growth, unbounded_growth=unbounded, min_eig_local=e1, min_eig_combined=e2,
        ellipticity_ok=e1 > 0 and e2 > 0, flags=flags,
    )


# -- linear problems as nonlinear ones -------------------------------------------


def _coef_fn(entry, d, kind):
    """Callable ``(t, s, ys) -> component-first array`` for a coefficient given as a number, nested list or callable."""

    def scalar(sp):
        if callable(sp):
            return lambda t, s, ys: np.asarray(sp(t, s, *ys), dtype=float)
        if sp is None or np.ndim(sp) == 0:
            val = 0.0 if sp is None else float(sp)
            return lambda t, s, ys: np.asarray(val)
        raise ArgumentError("only numbers and callables can be converted to a nonlinear problem")

    if kind == 0:
        return scalar(entry)
    if kind == 1:
        parts = entry if isinstance(entry, (list, tuple)) else [entry] * d
        fns = [scalar(p) for p in parts]
        return lambda t, s, ys: [f(t, s, ys) for f in fns]
    if isinstance(entry, (list, tuple)):
        fns = [[scalar(x) for x in row] for row in entry]
    else:
        diag = scalar(entry)
        zero = scalar(0.0)
        fns = [[diag if k == l else zero for l in range(d)] for k in range(d)]
    return lambda t, s, ys: [[f(t, s, ys) for f in row] for row in fns]


def linear_as_nonlinear(coeffs: LinearCoefficients, d: int = 1) -> NonlinearProblem:
    """Express a linear problem (numbers or callables only) through ``F``."""
    fn = {name: _coef_fn(getattr(coeffs, name), d, _KIND_OF_COEF.get(name, 0))
          for name in ("a", "abar", "b", "bbar", "c", "cbar")}
    fn["f"] = _coef_fn(coeffs.f, d, 0)
    have_t = all(
        getattr(coeffs, n + "_t") is not None or not callable(getattr(coeffs, n))
        for n in ("a", "abar", "b", "bbar", "c", "cbar", "f")
    )
    fn_t = {}
    if have_t:
        for n in ("a", "abar", "b", "bbar", "c", "cbar", "f"):
            entry = getattr(coeffs, n + "_t")
            fn_t[n] = _coef_fn(0.0 if entry is None else entry, d, _KIND_OF_COEF.get(n, 0))

    def ys_of(y):
        return (y,) if d == 1 else tuple(y)

    def vec(x):
        return [x] if d == 1 else [x[k] for k in range(d)]

    def mat(x):
        return [[x]] if d == 1 else [[x[k, l] for l in range(d)] for k in range(d)]

    def combine(table, t, s, y, u, p, q, l, m, n):
        ys = ys_of(y)
        a, ab = table["a"](t, s, ys), table["abar"](t, s, ys)
        b, bb = table["b"](t, s, ys), table["bbar"](t, s, ys)
        qq, nn, pp, mm = mat(q), mat(n), vec(p), vec(m)
        out = table["c"](t, s, ys) * u + table["cbar"](t, s, ys) * l + table["f"](t, s, ys)
        for k in range(d):
            out = out + b[k] * pp[k] + bb[k] * mm[k]
            for j in range(d):
                out = out + a[k][j] * qq[k][j] + ab[k][j] * nn[k][j]
        return out

    def F(t, s, y, u, p, q, l, m, n):
        return combine(fn, t, s, y, u, p, q, l, m, n)

    def vec_closure(name):
        def c(t, s, y, *rest):
            vals = fn[name](t, s, ys_of(y))
            return vals[0] if d == 1 else vals
        return c

    def mat_closure(name):
        def c(t, s, y, *rest):
            vals = fn[name](t, s, ys_of(y))
            return vals[0][0] if d == 1 else vals
        return c

    def scal_closure(name):
        return lambda t, s, y, *rest: fn[name](t, s, ys_of(y))

    F_t = None
    if have_t:
        def F_t(t, s, y, u, p, q, l, m, n):
            return combine(fn_t, t, s, y, u, p, q, l, m, n)

    return NonlinearProblem(
        F=F, g=coeffs.g, g_t=coeffs.g_t, d=d,
        F_u=scal_closure("c"), F_l=scal_closure("cbar"),
        F_p=vec_closure("b"), F_m=vec_closure("bbar"),
        F_q=mat_closure("a"), F_n=mat_closure("abar"), F_t=F_t,
    )
