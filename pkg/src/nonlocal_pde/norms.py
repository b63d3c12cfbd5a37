"""Discrete parabolic Hölder norms on t-slices and on the triangle.

A slice is a 2-d (or 3-d for ``d=2``) array over ``[0, t_i] x lattice`` with
s as the leading axis.  Seminorms enumerate node pairs: s-pairs by lag and
y-pairs by periodic shift, so the exhaustive variant is fully vectorised.
Distances use the wrapped metric on the torus.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError
from .grid import TriangleGrid, TriField, gradient, hessian, s_difference


@dataclass(frozen=True)
class HolderConfig:
    alpha: float = 0.5
    pair_budget: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.pair_budget < 0:
            raise ArgumentError("pair_budget must be >= 0")


@dataclass
class NormReport:
    sup: float
    semi_s: float
    semi_y: float
    c_alpha: float
    c_2alpha: float | None
    bracket: float
    double_bracket: float
    sampled: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def sup_norm(slice_values: np.ndarray) -> float:
    a = np.asarray(slice_values, dtype=float)
    if a.size == 0:
        raise ArgumentError("sup_norm of an empty slice")
    return float(np.max(np.abs(a)))


def _shift_vectors(n: int, d: int):
    """Representative periodic shifts: each unordered y-pair is hit at least once."""
    if d == 1:
        return [(k,) for k in range(1, n // 2 + 1)]
    return [k for k in itertools.product(range(n), repeat=d) if any(k)]


def _wrapped(k: int, n: int) -> int:
    k = k % n
    return min(k, n - k)


def periodic_distance(shift, n: int, dy: float) -> float:
    return math.sqrt(sum(_wrapped(k, n) ** 2 for k in shift)) * dy


def _rows_longer_than(lengths, m):
    """Slice (or index array) of the slices with more than ``m`` valid nodes."""
    idx = np.flatnonzero(lengths > m)
    if idx.size and idx[-1] - idx[0] + 1 == idx.size:
        return slice(int(idx[0]), int(idx[-1]) + 1)
    return idx


def _shift_diff_max(X, shift, d):
    """max over space of |X - X shifted periodically by ``shift``| (keeps the s axis)."""
    space = tuple(range(X.ndim - d, X.ndim))
    if d == 1:
        (k,) = shift
        n = X.shape[-1]
        a = np.abs(X[..., k:] - X[..., : n - k]).max(axis=-1)
        b = np.abs(X[..., :k] - X[..., n - k :]).max(axis=-1)
        return np.maximum(a, b)
    rolled = np.roll(X, shift, axis=space)
    return np.abs(X - rolled).max(axis=space)


def _y_seminorm_nodes(Xv, dy, d, alpha):
    """Per-node y-seminorm of ``Xv`` with shape ``(K, *space)``."""
    K = Xv.shape[0]
    n = Xv.shape[-1]
    best = np.zeros(K)
    if d == 1:
        # wrap once so every periodic shift is a contiguous window
        wrapped = np.concatenate([Xv, Xv[:, : n // 2]], axis=1)
        buf = np.empty_like(Xv)
        for k in range(1, n // 2 + 1):
            np.subtract(wrapped[:, k : k + n], Xv, out=buf)
            np.abs(buf, out=buf)
            np.maximum(best, buf.max(axis=1) / periodic_distance((k,), n, dy) ** alpha, out=best)
        return best
    for shift in _shift_vectors(n, d):
        diff = _shift_diff_max(Xv, shift, d)
        np.maximum(best, diff / periodic_distance(shift, n, dy) ** alpha, out=best)
    return best


def _stack_seminorms(X, lengths, dt, dy, d, alpha):
    """Per-slice sup, s-seminorm and y-seminorm for a stack of slices.

    ``X`` has shape ``(B, M, *space)``; slice ``b`` is valid on its first
    ``lengths[b]`` s-nodes.  Differences are reduced over space before the
    validity mask is applied, which keeps the masks two dimensional.
    """
    B, M = X.shape[:2]
    lengths = np.asarray(lengths)
    space = tuple(range(2, 2 + d))
    valid = np.arange(M)[None, :] < lengths[:, None]
    sup = np.where(valid, np.abs(X).max(axis=space), 0.0).max(axis=1)

    semi_s = np.zeros(B)
    for m in range(1, M):
        rows = _rows_longer_than(lengths, m)
        if isinstance(rows, np.ndarray) and rows.size == 0:
            break
        top = int(lengths[rows].max())
        Xr = X[rows, :top]
        diff = np.abs(Xr[:, m:] - Xr[:, :-m]).max(axis=space)
        ok = np.arange(top - m)[None, :] + m < lengths[rows][:, None]
        denom = (m * dt) ** (alpha / 2.0)
        semi_s[rows] = np.maximum(semi_s[rows], np.where(ok, diff, 0.0).max(axis=1) / denom)

    # only valid nodes enter the y-seminorm; they are grouped by slice
    semi_y = np.zeros(B)
    nonempty = lengths > 0
    if nonempty.any():
        per_node = _y_seminorm_nodes(X[valid], dy, d, alpha)
        starts = np.concatenate([[0], np.cumsum(lengths[nonempty])[:-1]])
        semi_y[nonempty] = np.maximum.reduceat(per_node, starts)
    return sup, semi_s, semi_y


def _sampled_seminorms(X, lengths, dt, dy, d, alpha, budget, rng):
    B, M = X.shape[:2]
    n = X.shape[-1]
    sup = np.array([np.abs(X[b, : lengths[b]]).max() for b in range(B)])
    semi_s = np.zeros(B)
    semi_y = np.zeros(B)
    for b in range(B):
        L = int(lengths[b])
        if L > 1:
            j1 = rng.integers(0, L, budget)
            j2 = rng.integers(0, L, budget)
            keep = j1 != j2
            ys = tuple(rng.integers(0, n, budget) for _ in range(d))
            v1 = X[(b, j1) + ys][keep]
            v2 = X[(b, j2) + ys][keep]
            if v1.size:
                dist = (np.abs(j1 - j2)[keep] * dt) ** (alpha / 2.0)
                semi_s[b] = np.max(np.abs(v1 - v2) / dist)
        j = rng.integers(0, L, budget)
        ya = np.stack([rng.integers(0, n, budget) for _ in range(d)])
        yb = np.stack([rng.integers(0, n, budget) for _ in range(d)])
        keep = np.any(ya != yb, axis=0)
        if keep.any():
            v1 = X[(b, j) + tuple(ya)][keep]
            v2 = X[(b, j) + tuple(yb)][keep]
            k = np.abs(ya - yb)[:, keep]
            wrapped = np.minimum(k, n - k)
            dist = (np.sqrt((wrapped**2).sum(axis=0)) * dy) ** alpha
            semi_y[b] = np.max(np.abs(v1 - v2) / dist)
    return sup, semi_s, semi_y


def _stack_profile(X, lengths, dt, dy, d, cfg):
    if cfg.pair_budget:
        rng = np.random.default_rng(cfg.seed)
        return _sampled_seminorms(X, lengths, dt, dy, d, cfg.alpha, cfg.pair_budget, rng)
    return _stack_seminorms(X, lengths, dt, dy, d, cfg.alpha)


def _profile_with_derivatives(X, lengths, dt, dy, d, cfg, ds, dyk, dykl):
    """Per-slice |.|^(alpha) and |.|^(2+alpha) given derivative stacks."""
    sup, ss, sy = _stack_profile(X, lengths, dt, dy, d, cfg)
    c_a = sup + ss + sy
    if ds is None:
        return sup, ss, sy, c_a, None
    s_sup, s_ss, s_sy = _stack_profile(ds, lengths, dt, dy, d, cfg)
    c2 = sup + (s_sup + s_ss + s_sy)
    extra = (1,) * d
    M = X.shape[1]
    valid = (np.arange(M)[None, :] < np.asarray(lengths)[:, None]).reshape((X.shape[0], M) + extra)
    for k in range(d):
        c2 = c2 + np.where(valid, np.abs(dyk[k]), 0.0).reshape(X.shape[0], -1).max(axis=1)
    for k in range(d):
        for l in range(d):
            h_sup, h_ss, h_sy = _stack_profile(dykl[k, l], lengths, dt, dy, d, cfg)
            c2 = c2 + (h_sup + h_ss + h_sy)
    return sup, ss, sy, c_a, c2


def holder_norm_alpha(
    slice_values: np.ndarray,
    grid: TriangleGrid,
    cfg: HolderConfig | None = None,
    derivatives: dict | None = None,
    order: int | None = None,
) -> NormReport:
    """Hölder norms of one slice on ``[0, t] x lattice``.

    ``derivatives`` enables the 2+alpha variant and must then contain
    ``"s"`` (the s-derivative slice), ``"y"`` (first derivatives, component
    axis first) and ``"yy"`` (second derivatives, two component axes first).
    """
    cfg = cfg or HolderConfig()
    X = np.asarray(slice_values, dtype=float)
    d = grid.d
    if X.ndim != 1 + d or X.shape[0] == 0:
        raise ArgumentError(f"slice must have shape (n_s, {'n, ' * d}) got {X.shape}")
    if order is None:
        order = 2 if derivatives is not None else 0
    if order == 2:
        if derivatives is None or not {"s", "y", "yy"} <= set(derivatives):
            raise ArgumentError("2+alpha norm requested without s, y and yy derivative slices")
        ds = np.asarray(derivatives["s"], dtype=float)[None]
        dyk = np.asarray(derivatives["y"], dtype=float)[:, None]
        dykl = np.asarray(derivatives["yy"], dtype=float)[:, :, None]
    else:
        ds = dyk = dykl = None
    lengths = [X.shape[0]]
    sup, ss, sy, c_a, c2 = _profile_with_derivatives(X[None], lengths, grid.dt, grid.dy, d, cfg, ds, dyk, dykl)
    top = float(c2[0]) if c2 is not None else float(c_a[0])
    return NormReport(
        sup=float(sup[0]), semi_s=float(ss[0]), semi_y=float(sy[0]), c_alpha=float(c_a[0]),
        c_2alpha=None if c2 is None else float(c2[0]), bracket=top, double_bracket=top,
        sampled=bool(cfg.pair_budget),
    )


def slice_profile(values: np.ndarray, dt: float, dy: float, d: int, cfg: HolderConfig, order: int = 0):
    """Per-t-slice norm components of a triangle array ``(M, M, *space)``.

    Returns a dict of arrays indexed by the slice number.
    """
    X = np.asarray(values, dtype=float)
    M = X.shape[0]
    lengths = np.arange(1, M + 1)
    if order == 2:
        ds = s_difference(X, dt, scheme="central")
        dyk = gradient(X, d, dy)
        dykl = hessian(X, d, dy)
    else:
        ds = dyk = dykl = None
    sup, ss, sy, c_a, c2 = _profile_with_derivatives(X, lengths, dt, dy, d, cfg, ds, dyk, dykl)
    return {"sup": sup, "semi_s": ss, "semi_y": sy, "c_alpha": c_a, "c_2alpha": c2}


def tri_norms_array(U, dt, dy, d, cfg=None, order=0, V=None) -> NormReport:
    cfg = cfg or HolderConfig()
    pu = slice_profile(U, dt, dy, d, cfg, order)
    key = "c_2alpha" if order == 2 else "c_alpha"
    per_u = pu[key]
    bracket = float(per_u.max())
    if V is not None:
        pv = slice_profile(V, dt, dy, d, cfg, order)
        double = float((per_u + pv[key]).max())
    else:
        double = bracket
    c2 = pu["c_2alpha"]
    return NormReport(
        sup=float(pu["sup"].max()), semi_s=float(pu["semi_s"].max()), semi_y=float(pu["semi_y"].max()),
        c_alpha=float(pu["c_alpha"].max()), c_2alpha=None if c2 is None else float(c2.max()),
        bracket=bracket, double_bracket=double, sampled=bool(cfg.pair_budget),
    )


def tri_norms(u: TriField, v: TriField | None = None, cfg: HolderConfig | None = None, order: int = 0) -> NormReport:
    """Triangle norms: ``bracket`` is the max over t-slices of the slice norm
    (alpha or 2+alpha depending on ``order``), ``double_bracket`` adds the
    slice norm of ``v`` (the t-derivative field) before taking the max."""
    if v is not None and v.grid != u.grid:
        raise ArgumentError("u and v live on different grids")
    g = u.grid
    return tri_norms_array(u.values, g.dt, g.dy, g.d, cfg, order, None if v is None else v.values)


def max_pair_difference(U, dt, dy, d, cfg=None) -> float:
    """Max over row pairs ``i1 < i2`` of the alpha-norm of ``U[i2] - U[i1]``.

    ``U`` is a triangle array ``(M, M, *space)`` whose row ``i`` is valid on
    its first ``i + 1`` entries; each difference is measured on the common
    range.  Zero exactly when all rows agree there, which is the signature
    of a solution that does not depend on its first time argument.
    """
    cfg = cfg or HolderConfig()
    X = np.asarray(U, dtype=float)
    M = X.shape[0]
    best = 0.0
    for i in range(M - 1):
        D = X[i + 1:, : i + 1] - X[i, : i + 1][None]
        sup, ss, sy = _stack_profile(D, np.full(D.shape[0], i + 1), dt, dy, d, cfg)
        best = max(best, float((sup + ss + sy).max()))
    return best
