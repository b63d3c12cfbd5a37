"""Triangular time grid, field containers and the small stencil toolkit.

Fields live on ``{(t_i, s_j): 0 <= j <= i < n_time}`` times a periodic
lattice ``y_k = k * dy`` in each of ``d`` spatial axes.  They are stored as
dense arrays of shape ``(n_time, n_time, n_space, ...)`` whose strict upper
triangle (``j > i``) is kept at zero.  Keeping those entries at zero lets the
cumulative sums used by the t-quadrature run over whole columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError, GridIndexError


@dataclass(frozen=True)
class TriangleGrid:
    n_time: int
    d: int
    n_space: int
    T: float
    L: float

    @property
    def dt(self) -> float:
        return self.T / (self.n_time - 1)

    @property
    def dy(self) -> float:
        return self.L / self.n_space

    @property
    def tau(self) -> np.ndarray:
        """Shared t/s nodes."""
        return np.arange(self.n_time) * self.dt

    @property
    def y(self) -> np.ndarray:
        """One spatial axis of the lattice."""
        return np.arange(self.n_space) * self.dy

    @property
    def space_shape(self) -> tuple[int, ...]:
        return (self.n_space,) * self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_time, self.n_time) + self.space_shape

    def lattice(self, lead: int = 0) -> tuple[np.ndarray, ...]:
        """Spatial coordinates broadcastable against ``lead`` leading axes."""
        out = []
        for k in range(self.d):
            shape = [1] * (lead + self.d)
            shape[lead + k] = self.n_space
            out.append(self.y.reshape(shape))
        return tuple(out)

    def coordinates(self, lead: int = 0) -> np.ndarray:
        """Dense ``(d, 1, ..., n, ..., n)`` array of the lattice coordinates."""
        return np.stack(np.broadcast_arrays(*self.lattice(lead)))

    def ts_mesh(self) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, ...]]:
        """(t, s, ys) arrays broadcasting to ``self.shape``."""
        ones = (1,) * self.d
        t = self.tau.reshape((self.n_time, 1) + ones)
        s = self.tau.reshape((1, self.n_time) + ones)
        return t, s, self.lattice(lead=2)

    def tri_mask(self) -> np.ndarray:
        """Boolean mask of valid (i, j) pairs, broadcastable to ``shape``."""
        m = np.tri(self.n_time, dtype=bool)
        return m.reshape(m.shape + (1,) * self.d)

    def refine(self, levels: int = 1) -> "TriangleGrid":
        f = 2**levels
        return TriangleGrid((self.n_time - 1) * f + 1, self.d, self.n_space * f, self.T, self.L)


def build_grid(n_time: int, d: int, n_space: int, T: float, L_y: float) -> TriangleGrid:
    if int(n_time) != n_time or n_time < 2:
        raise ConfigurationError(f"n_time must be an integer >= 2, got {n_time}")
    if d not in (1, 2):
        raise ConfigurationError(f"d must be 1 or 2, got {d}")
    if int(n_space) != n_space or n_space < 4:
        raise ConfigurationError(f"n_space must be an integer >= 4, got {n_space}")
    if not np.isfinite(T) or T <= 0:
        raise ConfigurationError(f"horizon T must be positive, got {T}")
    if not np.isfinite(L_y) or L_y <= 0:
        raise ConfigurationError(f"period L_y must be positive, got {L_y}")
    return TriangleGrid(int(n_time), int(d), int(n_space), float(T), float(L_y))


@dataclass(eq=False)
class TriField:
    grid: TriangleGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ArgumentError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        mask = np.broadcast_to(self.grid.tri_mask(), vals.shape)
        if not np.all(np.isfinite(vals[mask])):
            raise ArgumentError("TriField entries must be finite")
        vals[~mask] = 0.0
        vals.setflags(write=False)
        self.values = vals

    @classmethod
    def zeros(cls, grid: TriangleGrid) -> "TriField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: TriangleGrid, fn: Callable) -> "TriField":
        """Sample ``fn(t, s, *y)`` on the triangle (the function may broadcast)."""
        t, s, ys = grid.ts_mesh()
        with np.errstate(all="ignore"):
            vals = np.broadcast_to(np.asarray(fn(t, s, *ys), dtype=float), grid.shape).copy()
        vals[~np.broadcast_to(grid.tri_mask(), grid.shape)] = 0.0
        return cls(grid, vals)

    def at(self, i_t: int, i_s: int):
        if not (0 <= i_s <= i_t < self.grid.n_time):
            raise GridIndexError(f"index pair (i_t={i_t}, i_s={i_s}) lies outside 0 <= i_s <= i_t")
        return self.values[i_t, i_s]

    def slice(self, i_t: int) -> np.ndarray:
        """Samples on ``[0, t_i] x lattice``, shape ``(i_t + 1, *space)``."""
        if not 0 <= i_t < self.grid.n_time:
            raise GridIndexError(f"t index {i_t} out of range")
        return self.values[i_t, : i_t + 1]

    def _other(self, other):
        if isinstance(other, TriField):
            if other.grid != self.grid:
                raise ArgumentError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return TriField(self.grid, self.values + self._other(other))

    def __sub__(self, other):
        return TriField(self.grid, self.values - self._other(other))

    def __mul__(self, other):
        return TriField(self.grid, self.values * self._other(other))

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return TriField(self.grid, -self.values)


@dataclass(eq=False)
class DiagField:
    grid: TriangleGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        expected = (self.grid.n_time,) + self.grid.space_shape
        if vals.shape != expected:
            raise ArgumentError(f"diagonal field shape {vals.shape} != {expected}")
        if not np.all(np.isfinite(vals)):
            raise ArgumentError("DiagField entries must be finite")
        vals.setflags(write=False)
        self.values = vals


def restrict_diagonal(u: TriField) -> DiagField:
    idx = np.arange(u.grid.n_time)
    return DiagField(u.grid, u.values[idx, idx])


# -- periodic central differences on the trailing ``d`` axes ---------------------


def d1(values: np.ndarray, k: int, d: int, dy: float) -> np.ndarray:
    ax = values.ndim - d + k
    return (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2.0 * dy)


def d2(values: np.ndarray, k: int, l: int, d: int, dy: float) -> np.ndarray:
    ax_k = values.ndim - d + k
    if k == l:
        return (np.roll(values, -1, axis=ax_k) - 2.0 * values + np.roll(values, 1, axis=ax_k)) / dy**2
    ax_l = values.ndim - d + l
    pp = np.roll(np.roll(values, -1, axis=ax_k), -1, axis=ax_l)
    pm = np.roll(np.roll(values, -1, axis=ax_k), 1, axis=ax_l)
    mp = np.roll(np.roll(values, 1, axis=ax_k), -1, axis=ax_l)
    mm = np.roll(np.roll(values, 1, axis=ax_k), 1, axis=ax_l)
    return (pp - pm - mp + mm) / (4.0 * dy * dy)


def gradient(values: np.ndarray, d: int, dy: float) -> np.ndarray:
    """Stack of first differences, component axis first."""
    return np.stack([d1(values, k, d, dy) for k in range(d)])


def hessian(values: np.ndarray, d: int, dy: float) -> np.ndarray:
    """Symmetric stack of second differences with two leading component axes."""
    out = np.empty((d, d) + values.shape)
    for k in range(d):
        for l in range(k, d):
            out[k, l] = d2(values, k, l, d, dy)
            out[l, k] = out[k, l]
    return out


def diag_derivatives(phi: DiagField) -> tuple[list[DiagField], dict[tuple[int, int], DiagField]]:
    g = phi.grid
    grad = [DiagField(g, d1(phi.values, k, g.d, g.dy)) for k in range(g.d)]
    hess: dict[tuple[int, int], DiagField] = {}
    for k in range(g.d):
        for l in range(k, g.d):
            h = DiagField(g, d2(phi.values, k, l, g.d, g.dy))
            hess[(k, l)] = h
            hess[(l, k)] = h
    return grad, hess


# -- quadrature and differences along the time axes ------------------------------


def integrate_t_segment(v: TriField, i_t: int, i_s: int, i_y) -> float:
    """Trapezoid rule for the integral of ``v(theta, s, y)`` over theta in [s, t]."""
    n = v.grid.n_time
    if not (0 <= i_s <= i_t < n):
        raise GridIndexError(f"segment requires 0 <= i_s <= i_t < {n}, got ({i_t}, {i_s})")
    if i_s == i_t:
        return 0.0
    iy = tuple(np.atleast_1d(i_y).astype(int))
    col = v.values[(slice(i_s, i_t + 1), i_s) + iy]
    return float(v.grid.dt * (col.sum() - 0.5 * (col[0] + col[-1])))


def segment_integrals(values: np.ndarray, dt: float) -> np.ndarray:
    """All trapezoid integrals ``int_{s_j}^{t_i} v(theta, s_j) dtheta`` at once.

    ``values`` is a triangle-shaped array with zeros above the diagonal.
    """
    n = values.shape[0]
    cs = np.cumsum(values, axis=0)
    idx = np.arange(n)
    diag = values[idx, idx]
    out = dt * (cs - 0.5 * diag[None] - 0.5 * values)
    mask = np.tri(n, dtype=bool).reshape((n, n) + (1,) * (values.ndim - 2))
    return np.where(mask, out, 0.0)


def t_difference(values: np.ndarray, dt: float, order: int = 1) -> np.ndarray:
    """Finite difference along t at fixed (s, y) inside the triangle.

    Central differences in the interior of each column ``j``; at ``i = j`` and
    ``i = n-1`` one-sided differences of the requested ``order`` (1 or 2, the
    second-order stencil is used only when the column has three nodes).  The
    single-node column ``j = n-1`` copies its left neighbour's value.
    """
    n = values.shape[0]
    out = np.zeros_like(values)
    if n < 2:
        return out
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    for j in range(n - 1):
        m = n - j
        col = values[j:, j]
        if order == 2 and m >= 3:
            out[j, j] = (-3.0 * col[0] + 4.0 * col[1] - col[2]) / (2.0 * dt)
            out[n - 1, j] = (3.0 * col[-1] - 4.0 * col[-2] + col[-3]) / (2.0 * dt)
        else:
            out[j, j] = (col[1] - col[0]) / dt
            out[n - 1, j] = (col[-1] - col[-2]) / dt
    if n >= 2:
        out[n - 1, n - 1] = out[n - 1, n - 2]
    mask = np.tri(n, dtype=bool).reshape((n, n) + (1,) * (values.ndim - 2))
    return np.where(mask, out, 0.0)


def axis_difference(values: np.ndarray, h: float, axis: int = 0, order: int = 2) -> np.ndarray:
    """Derivative along one uniform axis: central inside, one-sided at the ends."""
    x = np.moveaxis(values, axis, 0)
    n = x.shape[0]
    out = np.zeros_like(x, dtype=float)
    if n == 1:
        return np.moveaxis(out, 0, axis)
    if n == 2 or order == 1:
        out[0] = (x[1] - x[0]) / h
        out[-1] = (x[-1] - x[-2]) / h
    else:
        out[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * h)
        out[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * h)
    if n > 2:
        out[1:-1] = (x[2:] - x[:-2]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def s_difference(values: np.ndarray, dt: float, scheme: str = "forward") -> np.ndarray:
    """Difference along s inside each t-slice of a triangle array.

    ``scheme="forward"`` uses ``(u_{j+1} - u_j)/dt`` for ``j < i`` and the
    backward difference at ``j = i``; ``"central"`` uses central differences
    with second-order one-sided ends where the slice is long enough.  The
    one-node slice ``i = 0`` gets zero.
    """
    n = values.shape[0]
    out = np.zeros_like(values)
    if scheme == "forward":
        out[:, :-1] = (values[:, 1:] - values[:, :-1]) / dt
        for i in range(1, n):
            out[i, i] = (values[i, i] - values[i, i - 1]) / dt
    elif scheme == "central":
        for i in range(1, n):
            out[i, : i + 1] = axis_difference(values[i, : i + 1], dt, axis=0, order=2)
    else:
        raise ArgumentError(f"unknown scheme {scheme!r}")
    mask = np.tri(n, dtype=bool).reshape((n, n) + (1,) * (values.ndim - 2))
    out = np.where(mask, out, 0.0)
    out[0, 0] = 0.0
    return out


def embed_t_independent(grid: TriangleGrid, slice_values: np.ndarray) -> TriField:
    """Tri-field ``u(t, s, y) = phi(s, y)`` built from a full-length slice."""
    vals = np.broadcast_to(slice_values[None], grid.shape).copy()
    return TriField(grid, vals)


def embed_s_independent(grid: TriangleGrid, row_values: np.ndarray) -> TriField:
    """Tri-field ``u(t, s, y) = g(t, y)`` (constant in s)."""
    vals = np.broadcast_to(row_values[:, None], grid.shape).copy()
    return TriField(grid, vals)


def sample_callable(fn, grid: TriangleGrid, args: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate ``fn(*args)`` and broadcast the result to ``grid.shape``."""
    with np.errstate(all="ignore"):
        out = np.asarray(fn(*args), dtype=float)
    return np.broadcast_to(out, grid.shape)
