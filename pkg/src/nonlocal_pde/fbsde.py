"""Monte Carlo check of the stochastic representation of backward solutions.

For a backward equation ``u_s = F(...)`` on ``t0 <= t <= s <= T`` with data
``u(t, T, .) = g(t, .)`` and a forward diffusion ``dX = b ds + sigma dW``,
the fields

    Y(t,s) = u(t,s,X_s),   Z(t,s) = (sigma^T u_y)(t,s,X_s),
    Gamma(t,s) = (sigma^T (sigma^T u_y)_y)(t,s,X_s),   A(t,s) = D(sigma^T u_y)(t,s,X_s)

satisfy ``dY(t,.) = Fbar ds + Z dW`` and ``dZ(t,.) = A ds + Gamma dW`` where
``Fbar = F + 0.5 tr(sigma sigma^T u_yy) + b.u_y`` and
``D phi = phi_s + 0.5 tr(sigma sigma^T phi_yy) + b.phi_y``.  The residuals of
these identities along simulated paths should have mean zero.

Conventions: ``b(s, y)`` and ``sigma(s, y)`` take ``y`` as a plain array of
paths for ``d = 1`` and with a leading component axis otherwise; ``b``
returns ``d`` components and ``sigma`` a ``d x k`` matrix (plain arrays for
``d = k = 1``).  Numbers are accepted for constant coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ArgumentError, NumericalError
from .grid import TriangleGrid, axis_difference, gradient, hessian
from .linear import LinearSolution
from .nonlinear import FEvaluator, NonlinearProblem, _State, solve_nonlinear
from .hjb import time_reverse


@dataclass
class PathBundle:
    """Euler-Maruyama paths ``X`` (``n_paths x (n_steps+1) x d``) and increments ``dW``."""

    n_paths: int
    n_steps: int
    dt: float
    t0: float
    T: float
    dW: np.ndarray
    X: np.ndarray
    seed: int
    b: Any
    sigma: Any
    d: int = 1
    k: int = 1
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def _eval_b(b, s, X, d, P):
    """Drift at states ``X`` (P, d) -> (P, d)."""
    if callable(b):
        y = X[:, 0] if d == 1 else X.T
        out = np.asarray(b(s, y), dtype=float)
        out = out[:, None] if (d == 1 and out.ndim == 1) else (out.T if out.ndim == 2 else out)
    else:
        out = np.asarray(b, dtype=float)
    return np.broadcast_to(out, (P, d))


def _eval_sigma(sigma, s, X, d, k, P):
    """Volatility at states ``X`` -> (P, d, k)."""
    if callable(sigma):
        y = X[:, 0] if d == 1 else X.T
        out = np.asarray(sigma(s, y), dtype=float)
        if d == 1 and k == 1:
            out = out.reshape(-1, 1, 1) if out.ndim else out.reshape(1, 1, 1)
        elif out.ndim == 3:
            out = np.moveaxis(out, -1, 0)
    else:
        out = np.asarray(sigma, dtype=float)
        if d == 1 and k == 1:
            out = out.reshape(-1, 1, 1) if out.ndim else out.reshape(1, 1, 1)
    return np.broadcast_to(out, (P, d, k))


def _lipschitz_probe(fn, evaluator, X, s, rng, samples=256):
    """Largest difference quotient over random pairs of observed states."""
    P = X.shape[0]
    i = rng.integers(0, P, samples)
    j = rng.integers(0, P, samples)
    keep = np.any(X[i] != X[j], axis=1)
    if not keep.any():
        return 0.0
    fi = evaluator(fn, s, X[i]).reshape(samples, -1)
    fj = evaluator(fn, s, X[j]).reshape(samples, -1)
    num = np.linalg.norm(fi - fj, axis=1)[keep]
    den = np.linalg.norm(X[i] - X[j], axis=1)[keep]
    return float(np.max(num / den))


def _initial_states(y0, P, d):
    """Start points: a scalar, a length-``d`` point, or one entry per path."""
    y = np.asarray(y0, dtype=float)
    if d == 1 and y.ndim == 1 and y.shape[0] == P:
        y = y[:, None]
    try:
        return np.broadcast_to(y, (P, d))
    except ValueError:
        raise ArgumentError(f"initial states of shape {y.shape} do not fit {P} paths in dimension {d}") from None


def simulate_forward(
    b,
    sigma,
    y0,
    T: float,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    t0: float = 0.0,
    d: int = 1,
    k: int | None = None,
) -> PathBundle:
    """Euler-Maruyama paths on ``[t0, T]`` started from ``y0``.

    States are not wrapped; periodic wrapping happens when fields are
    interpolated.  Identical seeds reproduce identical bundles.
    """
    k = d if k is None else k
    if n_paths < 1 or n_steps < 1:
        raise ArgumentError("n_paths and n_steps must be positive")
    if not T > t0:
        raise ArgumentError("T must exceed t0")
    dt = (T - t0) / n_steps
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((n_paths, n_steps, k)) * math.sqrt(dt)
    X = np.empty((n_paths, n_steps + 1, d))
    X[:, 0] = _initial_states(y0, n_paths, d)
    bf = lambda fn, s, x: _eval_b(fn, s, x, d, x.shape[0])  # noqa: E731
    sf = lambda fn, s, x: _eval_sigma(fn, s, x, d, k, x.shape[0])  # noqa: E731
    for m in range(n_steps):
        s = t0 + m * dt
        x = X[:, m]
        with np.errstate(all="ignore"):
            step = bf(b, s, x) * dt + np.einsum("pdk,pk->pd", sf(sigma, s, x), dW[:, m])
            X[:, m + 1] = x + step
        if not np.all(np.isfinite(X[:, m + 1])):
            raise NumericalError(f"forward SDE blew up at step {m + 1} (s = {s + dt:.6g})")
    diag_rng = np.random.default_rng(seed + 1)
    lip_b = max(_lipschitz_probe(b, bf, X[:, m], t0 + m * dt, diag_rng) for m in (0, n_steps // 2, n_steps))
    lip_s = max(_lipschitz_probe(sigma, sf, X[:, m], t0 + m * dt, diag_rng) for m in (0, n_steps // 2, n_steps))
    return PathBundle(
        n_paths=n_paths, n_steps=n_steps, dt=dt, t0=t0, T=T, dW=dW, X=X, seed=seed, b=b, sigma=sigma,
        d=d, k=k, diagnostics={"lipschitz_b": lip_b, "lipschitz_sigma": lip_s},
    )


# -- backward fields ----------------------------------------------------------------


@dataclass
class BackwardField:
    """Solution of a backward equation on the grid.

    ``values[i, j]`` approximates ``u(t_i, s_j, .)`` for ``i <= j`` with
    ``t_i = t0 + i dt``; entries with ``j < i`` are unused.  ``problem`` is
    the backward right-hand side (terminal data in ``problem.g``).
    """

    grid: TriangleGrid
    t0: float
    T: float
    values: np.ndarray
    problem: NonlinearProblem | None = None

    @classmethod
    def from_forward(cls, forward, T: float, forward_problem: NonlinearProblem | None = None) -> "BackwardField":
        """Backward field ``u(t, s) = u'(T - t, T - s)`` from a forward solution."""
        u = forward.u if isinstance(forward, LinearSolution) else forward
        grid = u.grid
        fv = u.values
        N = grid.n_time
        out = np.zeros(grid.shape)
        for i in range(N):
            out[i, i:] = fv[N - 1 - i, : N - i][::-1]
        prob = None if forward_problem is None else time_reverse(forward_problem, T)
        return cls(grid, T - grid.T, T, out, prob)

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.grid.tau

    def s_derivative(self, arr: np.ndarray) -> np.ndarray:
        """Second-order s-difference inside each row's valid range ``j >= i``."""
        N = self.grid.n_time
        out = np.zeros_like(arr)
        for i in range(N - 1):
            out[:, i, i:] = axis_difference(arr[:, i, i:], self.grid.dt, axis=1, order=2)
        out[:, N - 1, N - 1] = out[:, N - 2, N - 1] if N > 1 else 0.0
        return out


def solve_backward(
    prob: NonlinearProblem,
    grid: TriangleGrid,
    T: float,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> BackwardField:
    """Solve ``u_s = F`` on ``T - grid.T <= t <= s <= T`` with ``u(t, T) = g(t)``."""
    sol = solve_nonlinear(time_reverse(prob, T), grid, tol, max_iter)
    field_ = BackwardField.from_forward(sol, T)
    field_.problem = prob
    return field_


def _coef_grid(fn, s, grid):
    sa = s.reshape((-1,) + (1,) * grid.d)
    ys = grid.lattice(lead=1)
    y = ys[0] if grid.d == 1 else np.stack(np.broadcast_arrays(*ys))
    return np.asarray(fn(sa, y) if callable(fn) else fn, dtype=float)


def _sigma_grid(sigma, s, grid, d, k):
    """``sigma(s, y)`` on the (s, y) lattice -> (d, k, len(s), *space)."""
    out = _coef_grid(sigma, s, grid)
    if d == 1 and k == 1:
        out = out.reshape((1, 1) + out.shape)
    elif out.ndim == 2:
        out = out.reshape(out.shape + (1,) * (1 + d))
    return np.broadcast_to(out, (d, k, len(s)) + grid.space_shape)


def _b_grid(b, s, grid, d):
    """``b(s, y)`` on the (s, y) lattice -> (d, len(s), *space)."""
    out = _coef_grid(b, s, grid)
    if d == 1:
        out = out.reshape((1,) + out.shape)
    elif out.ndim == 1:
        out = out.reshape(out.shape + (1,) * (1 + d))
    return np.broadcast_to(out, (d, len(s)) + grid.space_shape)


_ROW_FIELDS = ("u", "uy", "uyy", "Z", "Gamma", "A")
_DIAG_FIELDS = ("u", "uy", "uyy")


def _stack_components(arrays: dict, names, trailing: int):
    """Move component axes last and concatenate -> (*rest, C) with a layout for splitting."""
    parts, layout = [], []
    for name in names:
        arr = arrays[name]
        comps = arr.shape[: arr.ndim - trailing]
        flat = arr.reshape((-1,) + arr.shape[arr.ndim - trailing:])
        parts.append(np.moveaxis(flat, 0, -1))
        layout.append((name, comps))
    return np.concatenate(parts, axis=-1), layout


def _split_components(values, layout):
    out, c = {}, 0
    for name, comps in layout:
        size = int(np.prod(comps)) if comps else 1
        out[name] = values[..., c: c + size].reshape(values.shape[:-1] + comps)
        c += size
    return out


@dataclass
class FKFields:
    """Lazy evaluation of ``(Y, Z, Gamma, A)`` along the paths for one t-node at a time.

    Grid fields are stored with component axes first; interpolation is
    linear in s and periodic multilinear in y.
    """

    field: BackwardField
    paths: PathBundle
    sigma: Any
    grid_data: dict
    _corners: list | None = None

    def t_nodes(self) -> np.ndarray:
        return self.field.nodes

    def first_step(self, i_t: int) -> int:
        t = self.field.nodes[i_t]
        p = self.paths
        return int(math.ceil((t - p.t0) / p.dt - 1e-9))

    def _spatial_corners(self):
        """Flat spatial indices and weights of the 2^d cell corners at every path node."""
        if self._corners is None:
            g = self.field.grid
            d, n = g.d, g.n_space
            x = np.mod(self.paths.X, g.L) / g.dy
            k0 = np.floor(x).astype(np.int64) % n
            wy = x - np.floor(x)
            k1 = (k0 + 1) % n
            corners = []
            for corner in np.ndindex(*(2,) * d):
                flat = np.zeros(x.shape[:2], dtype=np.int64)
                wt = np.ones(x.shape[:2])
                for a in range(d):
                    flat = flat * n + np.where(corner[a], k1[..., a], k0[..., a])
                    wt = wt * np.where(corner[a], wy[..., a], 1.0 - wy[..., a])
                corners.append((flat, wt))
            self._corners = corners
        return self._corners

    def _s_stencil(self, tau):
        g = self.field.grid
        pos = (tau - self.field.t0) / g.dt
        j0 = np.clip(np.floor(pos + 1e-9).astype(np.int64), 0, g.n_time - 1)
        j1 = np.minimum(j0 + 1, g.n_time - 1)
        ws = np.clip(pos - j0, 0.0, 1.0)
        return ((j0, 1.0 - ws), (j1, ws))

    def _gather(self, table, sel, m0):
        """``table`` is (N * n_space^d, C); returns (paths, steps, C)."""
        nsp = self.field.grid.n_space ** self.field.grid.d
        tau = self.paths.times[m0:]
        # every path shares the time steps, so interpolate in s once
        grid_rows = table.reshape(-1, nsp, table.shape[-1])
        (j0, w0), (j1, w1) = self._s_stencil(tau)
        in_s = (grid_rows[j0] * w0[:, None, None] + grid_rows[j1] * w1[:, None, None]).reshape(-1, table.shape[-1])
        step = np.arange(len(tau))[None, :] * nsp
        acc = None
        for flat, wt in self._spatial_corners():
            term = np.take(in_s, step + flat[sel, m0:], axis=0) * wt[sel, m0:, None]
            acc = term if acc is None else acc + term
        return acc

    def at(self, i_t: int, paths: slice | None = None) -> dict:
        """Fields at ``t = t_{i_t}`` on path steps ``m >= first_step``.

        Arrays have shape ``(n_paths, n_active)`` plus trailing component
        axes (``uy``, ``Z``, ``A``: one; ``uyy``, ``Gamma``: two).
        """
        sel = slice(None) if paths is None else paths
        m0 = self.first_step(i_t)
        g = self.field.grid
        rows = {}
        for name in _ROW_FIELDS:
            arr = self.grid_data[name]
            lead = arr.ndim - 2 - g.d
            rows[name] = arr[(slice(None),) * lead + (i_t,)]
        table, layout = _stack_components(rows, _ROW_FIELDS, 1 + g.d)
        out = _split_components(self._gather(table.reshape(-1, table.shape[-1]), sel, m0), layout)
        out.update(m0=m0, tau=self.paths.times[m0:], X=self.paths.X[sel, m0:], Y=out["u"])
        return out

    def diagonal(self, paths: slice | None = None, m0: int = 0) -> dict:
        """Diagonal triple ``u, u_y, u_yy`` at ``(tau, tau, X_tau)``."""
        sel = slice(None) if paths is None else paths
        g = self.field.grid
        rows = {name: self.grid_data["diag_" + name] for name in _DIAG_FIELDS}
        table, layout = _stack_components(rows, _DIAG_FIELDS, 1 + g.d)
        return _split_components(self._gather(table.reshape(-1, table.shape[-1]), sel, m0), layout)


def evaluate_fk_fields(u: BackwardField, sigma, paths: PathBundle) -> FKFields:
    """Precompute grid fields for the representation and return a lazy evaluator.

    All derivatives are central differences on the grid; the drift of the
    operator ``D`` is taken from ``paths.b``.
    """
    g = u.grid
    d, dy = g.d, g.dy
    if paths.d != d:
        raise ArgumentError(f"paths have dimension {paths.d}, grid has {d}")
    if paths.t0 < u.t0 - 1e-12 or paths.T > u.T + 1e-12:
        raise ArgumentError(
            f"paths cover [{paths.t0}, {paths.T}] but the field is defined on [{u.t0}, {u.T}]"
        )
    k = paths.k
    s = u.nodes
    U = u.values
    Uy = gradient(U, d, dy)  # (d, N, N, *sp)
    Uyy = hessian(U, d, dy)
    sig = _sigma_grid(sigma, s, g, d, k)[:, :, None]  # (d, k, 1, N, *sp) over (t, s)
    Phi = np.einsum("ik...,i...->k...", sig, Uy)  # (k, N, N, *sp)
    Phi_s = u.s_derivative(Phi)
    Phi_y = np.stack([gradient(Phi[c], d, dy) for c in range(k)], axis=1)  # (d, k, ...)
    Phi_yy = np.stack([hessian(Phi[c], d, dy) for c in range(k)], axis=2)  # (d, d, k, ...)
    bg = _b_grid(paths.b, s, g, d)[:, None]  # (d, 1, N, *sp)
    ssT = np.einsum("ik...,jk...->ij...", sig, sig)
    A = Phi_s + 0.5 * np.einsum("ij...,ijc...->c...", ssT, Phi_yy) + np.einsum("i...,ic...->c...", bg, Phi_y)
    Gamma = np.einsum("il...,ic...->cl...", sig, Phi_y)  # row c of Z, column l of dW
    idx = np.arange(g.n_time)
    grid_data = {
        "u": U,
        "uy": Uy,
        "uyy": Uyy,
        "Z": Phi,
        "Gamma": Gamma,
        "A": A,
        "diag_u": U[idx, idx],
        "diag_uy": Uy[:, idx, idx],
        "diag_uyy": Uyy[:, :, idx, idx],
    }
    return FKFields(u, paths, sigma, grid_data)


@dataclass
class ResidualReport:
    """Per-t-node mean, standard error and |mean|/SE of both residuals."""

    t_nodes: list
    y_mean: list
    y_se: list
    y_ratio: list
    y_max_abs: list
    z_mean: list
    z_se: list
    z_ratio: list
    z_max_abs: list
    max_ratio_y: float
    max_ratio_z: float
    max_abs_y: float
    max_abs_z: float
    n_paths: int
    n_steps: int
    per_path: dict | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "per_path"}


def _ratio(mean, se):
    if se > 0:
        return abs(mean) / se
    return 0.0 if mean == 0 else float("inf")


def _trapz_weights(n, h):
    if n < 2:
        return np.zeros(n)
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _path_coefficients(paths: PathBundle, sel, m0):
    """Drift (P, S, d) and volatility (P, S, d, k) along the selected paths."""
    d, k = paths.d, paths.k
    X = paths.X[sel, m0:]
    P, S = X.shape[:2]
    if not callable(paths.b) and not callable(paths.sigma):
        bv = _eval_b(paths.b, 0.0, X[:1, 0], d, 1)[0]
        sv = _eval_sigma(paths.sigma, 0.0, X[:1, 0], d, k, 1)[0]
        return np.broadcast_to(bv, (P, S, d)), np.broadcast_to(sv, (P, S, d, k))
    tau = paths.times[m0:]
    bv = np.empty((P, S, d))
    sv = np.empty((P, S, d, k))
    for m in range(S):
        bv[:, m] = _eval_b(paths.b, tau[m], X[:, m], d, P)
        sv[:, m] = _eval_sigma(paths.sigma, tau[m], X[:, m], d, k, P)
    return bv, sv


def _terminal(prob, t, XT, u_at_T):
    """``g(t, X_T)`` from the problem's terminal data, else the field's last column."""
    gfn = prob.g
    if callable(gfn):
        ys = [XT[:, a] for a in range(XT.shape[1])]
        return np.broadcast_to(np.asarray(gfn(t, *ys), dtype=float), (XT.shape[0],))
    if gfn is not None and np.ndim(gfn) == 0:
        return np.full(XT.shape[0], float(gfn))
    return u_at_T


def bsde_residual_stats(
    fields: FKFields,
    generator: NonlinearProblem | None = None,
    chunk: int = 2048,
    keep_per_path: bool = False,
) -> ResidualReport:
    """Residual statistics of the Y- and Z-identities for every t-node but the last.

    ``R_Y = Y(t, s) - g(t, X_T) + int_s^T Fbar dtau + int_s^T Z dW`` and
    ``R_Z = Z(t, T) - Z(t, s) - int_s^T A dtau - int_s^T Gamma dW`` with
    ``s`` the first path time at or after ``t``; trapezoid rule in time and
    left-point sums for the stochastic integrals.  The Z-residual is summed
    over its ``k`` components.  ``generator`` defaults to the field's
    backward problem.
    """
    paths = fields.paths
    f = fields.field
    prob = generator or f.problem
    if prob is None:
        raise ArgumentError("a generator (the backward problem) is required")
    fe = FEvaluator(prob)
    d = f.grid.d
    n_t = f.grid.n_time - 1
    P = paths.n_paths
    RY = np.empty((n_t, P))
    RZ = np.empty((n_t, P))
    for c0 in range(0, P, chunk):
        sel = slice(c0, min(P, c0 + chunk))
        diag_all = fields.diagonal(sel, 0)
        b_all, s_all = _path_coefficients(paths, sel, 0)
        for i_t in range(n_t):
            t = float(f.nodes[i_t])
            fld = fields.at(i_t, sel)
            m0 = fld["m0"]
            tau, X = fld["tau"], fld["X"]
            Pc, nt = X.shape[:2]
            uy = np.moveaxis(fld["uy"], -1, 0)
            uyy = np.moveaxis(fld["uyy"], (-2, -1), (0, 1))
            duy = np.moveaxis(diag_all["uy"][:, m0:], -1, 0)
            duyy = np.moveaxis(diag_all["uyy"][:, m0:], (-2, -1), (0, 1))
            state = _State(
                np.asarray(t), np.broadcast_to(tau[None, :], (Pc, nt)), np.moveaxis(X, -1, 0),
                fld["u"], uy, uyy, diag_all["u"][:, m0:], duy, duyy, (Pc, nt),
            )
            bv, sv = b_all[:, m0:], s_all[:, m0:]
            ssT = np.einsum("psik,psjk->psij", sv, sv)
            Fbar = fe.value(state) + 0.5 * np.einsum("psij,ijps->ps", ssT, uyy) + np.einsum("psi,ips->ps", bv, uy)
            w = _trapz_weights(nt, paths.dt)
            dW = paths.dW[sel, m0:]
            Zs = fld["Z"]
            gT = _terminal(prob, t, X[:, -1], fld["u"][:, -1])
            RY[i_t, sel] = fld["u"][:, 0] - gT + Fbar @ w + np.einsum("psk,psk->p", Zs[:, :-1], dW)
            rz = Zs[:, -1] - Zs[:, 0] - np.einsum("psk,s->pk", fld["A"], w)
            rz -= np.einsum("pskl,psl->pk", fld["Gamma"][:, :-1], dW)
            RZ[i_t, sel] = rz.sum(axis=1)

    def stats(R):
        mean = R.mean(axis=1)
        se = R.std(axis=1, ddof=1) / math.sqrt(P) if P > 1 else np.zeros(n_t)
        ratio = [_ratio(float(m), float(e)) for m, e in zip(mean, se)]
        return mean.tolist(), se.tolist(), ratio, np.abs(R).max(axis=1).tolist()

    ym, yse, yr, ya = stats(RY)
    zm, zse, zr, za = stats(RZ)
    per_path = {"t": f.nodes[:n_t].tolist(), "R_Y": RY, "R_Z": RZ} if keep_per_path else None
    return ResidualReport(
        t_nodes=f.nodes[:n_t].tolist(), y_mean=ym, y_se=yse, y_ratio=yr, y_max_abs=ya,
        z_mean=zm, z_se=zse, z_ratio=zr, z_max_abs=za,
        max_ratio_y=max(yr), max_ratio_z=max(zr), max_abs_y=max(ya), max_abs_z=max(za),
        n_paths=P, n_steps=paths.n_steps, per_path=per_path,
    )
