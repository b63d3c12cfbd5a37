"""Nonlocal linear solver built on the coupled (u, v = u_t) system.

For a fixed window of nodes ``start <= s <= t <= end`` the map ``gamma``
takes a guess ``v`` and returns the pair ``(u, V)``:

* ``u`` solves, slice by slice in t, the local problem with diffusion
  ``a + abar``, drift ``b + bbar``, reaction ``c + cbar`` and a source that
  subtracts the t-integrals of ``v`` (they stand in for the diagonal terms);
* ``V`` solves the t-differentiated equation, driven by the derivatives of
  ``u`` and by the same integrals weighted with the t-derivatives of the
  nonlocal coefficients.

Picard iteration on ``v`` converges on short enough windows.  When the
measured contraction factor stalls the window is halved; after a window is
accepted the rows with larger t are advanced across it with the now known
diagonal (a purely local problem), which supplies initial data for the next
window.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ArgumentError, ConsistencyError, ConvergenceError
from .grid import (
    TriangleGrid,
    TriField,
    embed_s_independent,
    gradient,
    hessian,
    segment_integrals,
    axis_difference,
    t_difference,
)
from .local import LocalOperatorSlice, advance_slice_step, check_ellipticity
from .norms import HolderConfig, NormReport, tri_norms, tri_norms_array

Spec = Any  # number | callable | ndarray | nested list (matrix/vector slots)


@dataclass
class LinearCoefficients:
    """Data of ``u_s = a:u_yy + b.u_y + c u + abar:u_yy(s,s) + bbar.u_y(s,s) + cbar u(s,s) + f``.

    Each slot accepts a number, a callable ``fn(t, s, *y)`` (``fn(t, *y)``
    for ``g``), or an array already sampled on the grid.  For ``d = 2`` the
    matrix slots may also be nested 2x2 lists and the vector slots lists of
    two entries.  Missing t-derivatives are replaced by central differences
    with step ``dt`` (callables) or grid differences (arrays).
    """

    a: Spec = 1.0
    abar: Spec = 0.0
    b: Spec = 0.0
    bbar: Spec = 0.0
    c: Spec = 0.0
    cbar: Spec = 0.0
    f: Spec = 0.0
    g: Spec = 0.0
    a_t: Spec = None
    abar_t: Spec = None
    b_t: Spec = None
    bbar_t: Spec = None
    c_t: Spec = None
    cbar_t: Spec = None
    f_t: Spec = None
    g_t: Spec = None

    def sample(self, grid: TriangleGrid) -> "SampledCoefficients":
        return sample_coefficients(self, grid)


@dataclass
class SampledCoefficients:
    """All coefficient fields on the full ``(n_time, n_time, *space)`` grid."""

    grid: TriangleGrid
    a: np.ndarray
    abar: np.ndarray
    b: np.ndarray
    bbar: np.ndarray
    c: np.ndarray
    cbar: np.ndarray
    f: np.ndarray
    a_t: np.ndarray
    abar_t: np.ndarray
    b_t: np.ndarray
    bbar_t: np.ndarray
    c_t: np.ndarray
    cbar_t: np.ndarray
    f_t: np.ndarray
    g: np.ndarray
    g_t: np.ndarray

    def sample(self, grid):
        return self


@dataclass
class SolverReport:
    iterations: int = 0
    contraction_factors: list = field(default_factory=list)
    subintervals: list = field(default_factory=list)
    final_increment: float = 0.0
    norm_snapshot: NormReport | None = None
    wall_time: float = 0.0
    windows: list = field(default_factory=list)
    converged: bool = True
    ellipticity: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "iterations": self.iterations,
            "contraction_factors": [float(x) for x in self.contraction_factors],
            "subintervals": [list(map(int, w)) for w in self.subintervals],
            "final_increment": float(self.final_increment),
            "norm_snapshot": None if self.norm_snapshot is None else self.norm_snapshot.to_dict(),
            "windows": self.windows,
            "converged": self.converged,
            "ellipticity": self.ellipticity,
        }
        out.update(self.extra)
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class LinearSolution:
    u: TriField
    v: TriField
    report: SolverReport

    @property
    def grid(self) -> TriangleGrid:
        return self.u.grid


# -- sampling ------------------------------------------------------------------


def _h_t(grid):
    return grid.dt


def _eval(fn, *args):
    with np.errstate(all="ignore"):
        return np.asarray(fn(*args), dtype=float)


def _values(entry, grid, shape):
    t, s, ys = grid.ts_mesh()
    if entry is None:
        entry = 0.0
    if callable(entry):
        return np.broadcast_to(_eval(entry, t, s, *ys), shape)
    if np.ndim(entry) == 0:
        return np.broadcast_to(np.asarray(float(entry)), shape)
    vals = np.asarray(entry, dtype=float)
    if vals.shape != shape:
        raise ArgumentError(f"sampled coefficient has shape {vals.shape}, expected {shape}")
    return vals


def _sample_scalar(entry, spec_t, grid, shape):
    """Return (values, t-derivative) arrays broadcast to ``shape``."""
    vals = _values(entry, grid, shape)
    if spec_t is not None:
        return vals, _values(spec_t, grid, shape)
    if callable(entry):
        t, s, ys = grid.ts_mesh()
        h = _h_t(grid)
        vt = (_eval(entry, t + h, s, *ys) - _eval(entry, t - h, s, *ys)) / (2.0 * h)
        return vals, np.broadcast_to(vt, shape)
    if entry is None or np.ndim(entry) == 0:
        return vals, np.broadcast_to(np.asarray(0.0), shape)
    return vals, t_difference(vals, grid.dt, order=2)


def _sample_vector(entry, spec_t, grid):
    d = grid.d
    shape = grid.shape
    if isinstance(entry, np.ndarray) and entry.shape == (d,) + shape:
        if spec_t is None:
            vt = np.stack([t_difference(entry[k], grid.dt, order=2) for k in range(d)])
        else:
            vt = np.asarray(_sample_vector(spec_t, 0.0, grid)[0])
        return entry.astype(float), vt
    if isinstance(entry, (list, tuple)):
        parts = entry
    else:
        parts = [entry] * d
    parts_t = spec_t if isinstance(spec_t, (list, tuple)) else [spec_t] * d
    vals, vts = zip(*(_sample_scalar(p, pt, grid, shape) for p, pt in zip(parts, parts_t)))
    return np.stack(vals), np.stack(vts)


def _sample_matrix(entry, spec_t, grid):
    d = grid.d
    shape = grid.shape
    if isinstance(entry, np.ndarray) and entry.shape == (d, d) + shape:
        if spec_t is None:
            vt = np.stack([np.stack([t_difference(entry[k, l], grid.dt, order=2) for l in range(d)]) for k in range(d)])
        else:
            vt = np.asarray(_sample_matrix(spec_t, 0.0, grid)[0])
        return entry.astype(float), vt
    if isinstance(entry, (list, tuple)):
        rows = entry
        rows_t = spec_t if isinstance(spec_t, (list, tuple)) else [[spec_t] * d for _ in range(d)]
    else:
        rows = [[entry if k == l else 0.0 for l in range(d)] for k in range(d)]
        rows_t = [[spec_t if k == l else 0.0 for l in range(d)] for k in range(d)]
    vals = np.empty((d, d) + shape)
    vts = np.empty((d, d) + shape)
    for k in range(d):
        for l in range(d):
            vals[k, l], vts[k, l] = _sample_scalar(rows[k][l], rows_t[k][l], grid, shape)
    return vals, vts


def _initial_values(entry, grid):
    shape = (grid.n_time,) + grid.space_shape
    t = grid.tau.reshape((grid.n_time,) + (1,) * grid.d)
    ys = grid.lattice(lead=1)
    if entry is None:
        entry = 0.0
    if callable(entry):
        return np.array(np.broadcast_to(_eval(entry, t, *ys), shape))
    if np.ndim(entry) == 0:
        return np.full(shape, float(entry))
    g = np.asarray(entry, dtype=float)
    if g.shape != shape:
        raise ArgumentError(f"initial data has shape {g.shape}, expected {shape}")
    return g.copy()


def _sample_initial(entry, spec_t, grid):
    g = _initial_values(entry, grid)
    if spec_t is not None:
        return g, _initial_values(spec_t, grid)
    if callable(entry):
        t = grid.tau.reshape((grid.n_time,) + (1,) * grid.d)
        ys = grid.lattice(lead=1)
        h = _h_t(grid)
        gt = (_eval(entry, t + h, *ys) - _eval(entry, t - h, *ys)) / (2.0 * h)
        return g, np.array(np.broadcast_to(gt, g.shape))
    if entry is None or np.ndim(entry) == 0:
        return g, np.zeros_like(g)
    return g, axis_difference(g, grid.dt, axis=0, order=2)


def sample_coefficients(coeffs: LinearCoefficients, grid: TriangleGrid) -> SampledCoefficients:
    if isinstance(coeffs, SampledCoefficients):
        return coeffs
    shape = grid.shape
    a, a_t = _sample_matrix(coeffs.a, coeffs.a_t, grid)
    abar, abar_t = _sample_matrix(coeffs.abar, coeffs.abar_t, grid)
    b, b_t = _sample_vector(coeffs.b, coeffs.b_t, grid)
    bbar, bbar_t = _sample_vector(coeffs.bbar, coeffs.bbar_t, grid)
    c, c_t = _sample_scalar(coeffs.c, coeffs.c_t, grid, shape)
    cbar, cbar_t = _sample_scalar(coeffs.cbar, coeffs.cbar_t, grid, shape)
    f, f_t = _sample_scalar(coeffs.f, coeffs.f_t, grid, shape)
    g, g_t = _sample_initial(coeffs.g, coeffs.g_t, grid)
    out = SampledCoefficients(grid, a, abar, b, bbar, c, cbar, f, a_t, abar_t, b_t, bbar_t, c_t, cbar_t, f_t, g, g_t)
    mask = np.broadcast_to(grid.tri_mask(), shape)
    for name in ("a", "abar", "b", "bbar", "c", "cbar", "f", "a_t", "abar_t", "b_t", "bbar_t", "c_t", "cbar_t", "f_t"):
        arr = getattr(out, name)
        if not np.all(np.isfinite(np.broadcast_to(arr, arr.shape)[..., mask])):
            raise ArgumentError(f"coefficient {name} is not finite on the triangle")
    return out


# -- the window machinery -------------------------------------------------------


def _node_locator(grid: TriangleGrid, offset=(0, 0)):
    def locate(where):
        i, j = where[0] + offset[0], where[1] + offset[1]
        ys = ", ".join(f"{grid.y[k]:.4g}" for k in where[2:])
        return f"node t={grid.tau[i]:.4g}, s={grid.tau[j]:.4g}, y=({ys})"

    return locate


def check_linear_ellipticity(C: SampledCoefficients) -> float:
    g = C.grid
    mask = np.broadcast_to(g.tri_mask(), g.shape)
    lam1 = check_ellipticity(C.a, "a (local part)", _node_locator(g), mask)
    lam2 = check_ellipticity(C.a + C.abar, "a + abar (local plus diagonal part)", _node_locator(g), mask)
    return min(lam1, lam2)


def _contract(coef, deriv, ncomp):
    """Sum over component axes of coef * deriv (coef broadcast over deriv)."""
    if ncomp == 1:
        return np.einsum("k...,k...->...", coef, deriv)
    return np.einsum("kl...,kl...->...", coef, deriv)


def _mask(values):
    n = values.shape[0]
    m = np.tri(n, values.shape[1], dtype=bool).reshape(values.shape[:2] + (1,) * (values.ndim - 2))
    return np.where(m, values, 0.0)


def march_region(A, B, Cr, phi, init, triangular, dt, dy, theta=0.5):
    """Advance the rows of a region along s; ``init`` are the rows at the first level.

    Arrays carry (row, level) axes after their component axes.  With
    ``triangular`` row ``r`` only lives on levels ``<= r``.
    """
    R, M = phi.shape[:2]
    A = np.broadcast_to(A, A.shape[:2] + phi.shape)
    B = np.broadcast_to(B, B.shape[:1] + phi.shape)
    Cr = np.broadcast_to(Cr, phi.shape)
    out = np.zeros(phi.shape)
    out[:, 0] = init
    for j in range(M - 1):
        rows = slice(j + 1, R) if triangular else slice(0, R)
        now = LocalOperatorSlice(A[:, :, rows, j], B[:, rows, j], Cr[rows, j], phi[rows, j])
        nxt = LocalOperatorSlice(A[:, :, rows, j + 1], B[:, rows, j + 1], Cr[rows, j + 1], phi[rows, j + 1])
        out[rows, j + 1] = advance_slice_step(out[rows, j], now, dt, theta, nxt, dy=dy)
    return out


class _Engine:
    """Holds the sampled data and performs the window-level computations."""

    def __init__(self, C: SampledCoefficients, theta: float, cfg: HolderConfig):
        self.C = C
        self.g = C.grid
        self.theta = theta
        self.cfg = cfg

    # region views (rows ``r0:r1``, s-levels ``c0:c1``)
    def view(self, name, r0, r1, c0, c1):
        arr = getattr(self.C, name)
        lead = arr.ndim - 2 - self.g.d
        return arr[(slice(None),) * lead + (slice(r0, r1), slice(c0, c1))]

    def march(self, A, B, Cr, phi, init, triangular):
        return march_region(A, B, Cr, phi, init, triangular, self.g.dt, self.g.dy, self.theta)

    def gamma(self, v_in, st, en, u_init, v_init):
        g = self.g
        d = g.d
        sl = (st, en + 1, st, en + 1)
        a, abar = self.view("a", *sl), self.view("abar", *sl)
        b, bbar = self.view("b", *sl), self.view("bbar", *sl)
        c, cbar = self.view("c", *sl), self.view("cbar", *sl)
        I0 = segment_integrals(v_in, g.dt)
        I1 = gradient(I0, d, g.dy)
        I2 = hessian(I0, d, g.dy)
        phi1 = self.view("f", *sl) - _contract(abar, I2, 2) - _contract(bbar, I1, 1) - cbar * I0
        U = self.march(a + abar, b + bbar, c + cbar, phi1, u_init, True)
        U = _mask(U)
        Uy = gradient(U, d, g.dy)
        Uyy = hessian(U, d, g.dy)
        a_t, abar_t = self.view("a_t", *sl), self.view("abar_t", *sl)
        b_t, bbar_t = self.view("b_t", *sl), self.view("bbar_t", *sl)
        c_t, cbar_t = self.view("c_t", *sl), self.view("cbar_t", *sl)
        phi2 = (
            _contract(a_t + abar_t, Uyy, 2)
            + _contract(b_t + bbar_t, Uy, 1)
            + (c_t + cbar_t) * U
            - _contract(abar_t, I2, 2)
            - _contract(bbar_t, I1, 1)
            - cbar_t * I0
            + self.view("f_t", *sl)
        )
        V = self.march(a, b, c, phi2, v_init, True)
        return U, _mask(V)

    def extend(self, u, v, st, en, row_end=None):
        """Advance rows ``t_en < t <= t_row_end`` over ``s in [s_st, s_en]``
        using the known diagonal."""
        g = self.g
        d = g.d
        N = g.n_time if row_end is None else row_end + 1
        if en >= N - 1:
            return
        sl = (en + 1, N, st, en + 1)
        idx = np.arange(st, en + 1)
        D0 = u[idx, idx][None]  # (1, M, *space)
        D1 = gradient(D0, d, g.dy)
        D2 = hessian(D0, d, g.dy)
        a, abar = self.view("a", *sl), self.view("abar", *sl)
        b, bbar = self.view("b", *sl), self.view("bbar", *sl)
        c, cbar = self.view("c", *sl), self.view("cbar", *sl)
        phi1 = _contract(abar, D2, 2) + _contract(bbar, D1, 1) + cbar * D0 + self.view("f", *sl)
        U = self.march(a, b, c, phi1, u[en + 1 : N, st], False)
        Uy = gradient(U, d, g.dy)
        Uyy = hessian(U, d, g.dy)
        phi2 = (
            _contract(self.view("a_t", *sl), Uyy, 2)
            + _contract(self.view("b_t", *sl), Uy, 1)
            + self.view("c_t", *sl) * U
            + _contract(self.view("abar_t", *sl), D2, 2)
            + _contract(self.view("bbar_t", *sl), D1, 1)
            + self.view("cbar_t", *sl) * D0
            + self.view("f_t", *sl)
        )
        V = self.march(a, b, c, phi2, v[en + 1 : N, st], False)
        u[en + 1 : N, st : en + 1] = U
        v[en + 1 : N, st : en + 1] = V

    def increment(self, diff):
        g = self.g
        return tri_norms_array(diff, g.dt, g.dy, g.d, self.cfg, order=0).bracket

    def picard(self, st, en, u_init, v_init, tol, max_iter, cap, seed=None):
        M = en - st + 1
        if seed is None:
            vk = _mask(np.broadcast_to(v_init[:, None], (M, M) + v_init.shape[1:]).copy())
        else:
            vk = _mask(np.array(seed, dtype=float))
        incs, factors = [], []
        stalled = 0
        U = None
        status = "max_iter"
        for k in range(1, max_iter + 1):
            U, V = self.gamma(vk, st, en, u_init, v_init)
            inc = self.increment(V - vk)
            if not np.isfinite(inc):
                status = "diverged"
                break
            if incs:
                fac = inc / incs[-1] if incs[-1] > 0 else 0.0
                factors.append(fac)
                stalled = stalled + 1 if fac >= cap else 0
            incs.append(inc)
            vk = V
            if inc <= tol:
                status = "converged"
                break
            if stalled >= 3:
                status = "stalled"
                break
        log = {
            "start": int(st), "end": int(en), "iterations": len(incs),
            "factors": [float(x) for x in factors], "final_increment": float(incs[-1]) if incs else 0.0,
            "accepted": status == "converged", "status": status,
        }
        return U, vk, log


def solve_region(
    engine: _Engine,
    u: np.ndarray,
    v: np.ndarray,
    st: int,
    en: int,
    tol: float,
    max_iter: int,
    cap: float,
    report: SolverReport,
    initial_window: int | None = None,
    seed: np.ndarray | None = None,
):
    """Fill the triangle ``st <= j <= i <= en`` of ``u, v`` in place.

    The rows ``u[st:, st]``/``v[st:, st]`` hold the initial data.  ``seed``
    optionally warm-starts the Picard iteration on the full region.
    """
    cur = st
    while cur < en:
        hi = en if initial_window is None else min(en, cur + initial_window)
        while True:
            s0 = None
            if seed is not None and cur == st and hi == en:
                s0 = seed
            U, V, log = engine.picard(cur, hi, u[cur : hi + 1, cur], v[cur : hi + 1, cur], tol, max_iter, cap, s0)
            report.windows.append(log)
            report.iterations += log["iterations"]
            if log["accepted"]:
                break
            if hi - cur <= 1:
                report.converged = False
                raise ConvergenceError(
                    f"Picard iteration did not converge on the minimal window [{cur}, {hi}] "
                    f"(status {log['status']}, last increment {log['final_increment']:.3e})",
                    report,
                )
            hi = cur + (hi - cur) // 2
        u[cur : hi + 1, cur : hi + 1] = np.where(_tri_like(U), U, u[cur : hi + 1, cur : hi + 1])
        v[cur : hi + 1, cur : hi + 1] = np.where(_tri_like(V), V, v[cur : hi + 1, cur : hi + 1])
        report.subintervals.append((cur, hi))
        report.contraction_factors.extend(log["factors"])
        report.final_increment = max(report.final_increment, log["final_increment"])
        if hi < en:
            # rows t in (t_hi, t_en] advanced across the accepted window
            engine.extend(u, v, cur, hi, row_end=en)
        cur = hi


def _tri_like(arr):
    n = arr.shape[0]
    return np.tri(n, dtype=bool).reshape((n, n) + (1,) * (arr.ndim - 2))


def _initial_arrays(C: SampledCoefficients):
    g = C.grid
    u = np.zeros(g.shape)
    v = np.zeros(g.shape)
    u[:, 0] = C.g
    v[:, 0] = C.g_t
    return u, v


def solve_linear(
    coeffs: LinearCoefficients | SampledCoefficients,
    grid: TriangleGrid,
    tol: float = 1e-8,
    max_iter: int = 200,
    contraction_cap: float = 0.9,
    theta: float = 0.5,
    norm_cfg: HolderConfig | None = None,
    initial_window: int | None = None,
) -> LinearSolution:
    """Solve the nonlocal linear problem on the whole triangle.

    ``initial_window`` (in nodes) caps the first window length, which forces
    the split-and-extend path even when the full window would contract.
    """
    t0 = time.perf_counter()
    if tol <= 0:
        raise ArgumentError("tolerance must be positive")
    C = sample_coefficients(coeffs, grid)
    lam = check_linear_ellipticity(C)
    engine = _Engine(C, theta, norm_cfg or HolderConfig())
    u, v = _initial_arrays(C)
    report = SolverReport(ellipticity=lam)
    solve_region(engine, u, v, 0, grid.n_time - 1, tol, max_iter, contraction_cap, report, initial_window)
    U, V = TriField(grid, u), TriField(grid, v)
    report.norm_snapshot = tri_norms(U, V, engine.cfg)
    report.wall_time = time.perf_counter() - t0
    return LinearSolution(U, V, report)


def gamma_map(
    v_in: TriField,
    coeffs: LinearCoefficients | SampledCoefficients,
    window: tuple[int, int] | None = None,
    initial_data: tuple[np.ndarray, np.ndarray] | None = None,
    theta: float = 0.5,
) -> tuple[TriField, TriField]:
    """One application of the contraction map on a window triangle.

    ``initial_data`` gives the rows ``(u, v)(t, s_start, .)`` for
    ``t_start <= t <= t_end``; it defaults to ``(g, g_t)`` and is required
    for windows that do not start at 0.  Values outside the window are zero.
    """
    grid = v_in.grid
    C = sample_coefficients(coeffs, grid)
    check_linear_ellipticity(C)
    st, en = (0, grid.n_time - 1) if window is None else window
    if not 0 <= st < en <= grid.n_time - 1:
        raise ArgumentError(f"invalid window {window}")
    if initial_data is None:
        if st != 0:
            raise ArgumentError("initial_data is required for windows that do not start at s=0")
        initial_data = (C.g, C.g_t)
    rows = []
    for arr in initial_data:
        arr = np.asarray(arr, dtype=float)
        if arr.shape[0] == grid.n_time:
            arr = arr[st : en + 1]
        if arr.shape != (en - st + 1,) + grid.space_shape:
            raise ArgumentError(f"initial rows have shape {arr.shape}")
        rows.append(arr)
    u0, v0 = rows
    engine = _Engine(C, theta, HolderConfig())
    U, V = engine.gamma(v_in.values[st : en + 1, st : en + 1], st, en, u0, v0)
    u_out = np.zeros(grid.shape)
    v_out = np.zeros(grid.shape)
    u_out[st : en + 1, st : en + 1] = U
    v_out[st : en + 1, st : en + 1] = V
    return TriField(grid, u_out), TriField(grid, v_out)


def check_equivalence(sol: LinearSolution) -> float:
    """Max of ``|v - D_t u|`` over all nodes where a t-difference exists."""
    g = sol.grid
    Dt = t_difference(sol.u.values, g.dt, order=1)
    res = np.abs(sol.v.values - Dt)
    mask = np.broadcast_to(g.tri_mask(), g.shape).copy()
    mask[g.n_time - 1, g.n_time - 1] = False
    return float(res[mask].max()) if mask.any() else 0.0


def _data_norm(C: SampledCoefficients, cfg: HolderConfig, f=None, f_t=None, g=None, g_t=None) -> float:
    grid = C.grid
    f = C.f if f is None else f
    f_t = C.f_t if f_t is None else f_t
    g = C.g if g is None else g
    g_t = C.g_t if g_t is None else g_t
    nf = tri_norms_array(_mask(np.array(f)), grid.dt, grid.dy, grid.d, cfg, order=0, V=_mask(np.array(f_t))).double_bracket
    G = embed_s_independent(grid, np.asarray(g))
    Gt = embed_s_independent(grid, np.asarray(g_t))
    ng = tri_norms(G, Gt, cfg, order=2).double_bracket
    return nf + ng


def schauder_ratio(sol: LinearSolution, coeffs, cfg: HolderConfig | None = None, tol: float = 1e-8) -> float:
    """Empirical Schauder constant ``||u||_{2+a} / (||f||_a + ||g||_{2+a})``."""
    cfg = cfg or HolderConfig()
    C = sample_coefficients(coeffs, sol.grid)
    num = tri_norms(sol.u, sol.v, cfg, order=2).double_bracket
    den = _data_norm(C, cfg)
    if den == 0.0:
        if num <= tol:
            return 0.0
        raise ConsistencyError(f"zero data norm but solution norm {num:.3e}")
    return num / den


_PRINCIPAL = ("a", "abar", "b", "bbar", "c", "cbar")


def stability_probe(
    coeffs,
    perturbed,
    grid: TriangleGrid,
    cfg: HolderConfig | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> tuple[float, float]:
    """Return ``(||u - u_hat||_{2+a}, ||f - f_hat||_a + ||g - g_hat||_{2+a})``."""
    cfg = cfg or HolderConfig()
    C = sample_coefficients(coeffs, grid)
    P = sample_coefficients(perturbed, grid)
    for name in _PRINCIPAL:
        if not np.array_equal(getattr(C, name), getattr(P, name)):
            raise ArgumentError(f"perturbed problem changes the coefficient {name!r}; only f and g may differ")
    s1 = solve_linear(C, grid, tol, max_iter)
    s2 = solve_linear(P, grid, tol, max_iter)
    lhs = tri_norms(s1.u - s2.u, s1.v - s2.v, cfg, order=2).double_bracket
    rhs = _data_norm(C, cfg, f=C.f - P.f, f_t=C.f_t - P.f_t, g=C.g - P.g, g_t=C.g_t - P.g_t)
    return lhs, rhs
