"""Theta-scheme stepper for local linear parabolic equations on the torus.

Solves ``u_s = A:u_yy + B.u_y + C u + phi`` for one or many independent
spatial fields at once (a leading batch of t-slices).  In one dimension the
implicit system is cyclic tridiagonal and is reduced to a banded solve with
the Sherman-Morrison formula; in two dimensions the five/nine point operator
is assembled as a sparse matrix and factorised directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import ArgumentError, ModelError, NumericalError
from .grid import d1, d2


@dataclass
class LocalOperatorSlice:
    """Coefficients of ``A:u_yy + B.u_y + C u + phi``.

    ``diffusion`` has shape ``(d, d, *rest)``, ``drift`` ``(d, *rest)``,
    ``reaction`` and ``source`` ``rest`` (anything broadcasting is accepted).
    ``rest`` ends with the spatial axes and may start with s or batch axes.
    """

    diffusion: np.ndarray
    drift: np.ndarray
    reaction: np.ndarray
    source: np.ndarray

    @property
    def d(self) -> int:
        return np.shape(self.diffusion)[0]

    @classmethod
    def scalar(cls, A, B=0.0, C=0.0, phi=0.0) -> "LocalOperatorSlice":
        """One-dimensional operator from scalar-valued fields."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        return cls(A[None, None], B[None], np.asarray(C, dtype=float), np.asarray(phi, dtype=float))

    def at(self, index) -> "LocalOperatorSlice":
        """Index the leading non-component axes (e.g. select one s-level)."""
        idx = index if isinstance(index, tuple) else (index,)

        def pick(arr, ncomp):
            arr = np.asarray(arr)
            if arr.ndim <= ncomp:
                return arr
            return arr[(slice(None),) * ncomp + idx]

        return LocalOperatorSlice(
            pick(self.diffusion, 2), pick(self.drift, 1), pick(self.reaction, 0), pick(self.source, 0)
        )


def min_eigenvalue(diffusion: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of the symmetric part, nodewise."""
    A = np.asarray(diffusion, dtype=float)
    if A.shape[0] == 1:
        return A[0, 0]
    a, c = A[0, 0], A[1, 1]
    b = 0.5 * (A[0, 1] + A[1, 0])
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def check_ellipticity(diffusion: np.ndarray, label: str = "diffusion", locate=None, mask=None) -> float:
    """Return the ellipticity witness ``lambda`` or raise naming the worst node.

    ``mask`` restricts the check to selected nodes (e.g. the triangle).
    """
    lam = np.asarray(min_eigenvalue(diffusion))
    if lam.size == 0:
        return float("inf")
    if mask is not None:
        mask = np.broadcast_to(mask, lam.shape)
        if not np.all(np.isfinite(lam[mask])):
            raise NumericalError(f"non-finite {label} coefficient")
        lam = np.where(mask, lam, np.inf)
    elif not np.all(np.isfinite(lam)):
        raise NumericalError(f"non-finite {label} coefficient")
    worst = float(lam.min())
    if worst <= 0.0:
        where = np.unravel_index(int(np.argmin(lam)), lam.shape)
        node = locate(where) if locate else f"array index {tuple(int(w) for w in where)}"
        raise ModelError(
            f"uniform ellipticity condition violated for {label}: smallest eigenvalue "
            f"{worst:.6g} <= 0 at {node}"
        )
    return worst


def apply_operator(u: np.ndarray, op: LocalOperatorSlice, dy: float) -> np.ndarray:
    """Explicit evaluation of ``A:u_yy + B.u_y + C u`` (source excluded)."""
    d = op.d
    A, B = np.asarray(op.diffusion), np.asarray(op.drift)
    out = np.asarray(op.reaction) * u
    for k in range(d):
        out = out + B[k] * d1(u, k, d, dy)
        for l in range(d):
            out = out + A[k, l] * d2(u, k, l, d, dy)
    return out


def _batched_banded(lower, diag, upper, rhs):
    """Solve independent tridiagonal systems stacked along the first axis.

    Blocks are concatenated into one long banded system whose coupling
    entries between consecutive blocks are zero, so one LAPACK call solves
    them all.  ``rhs`` has shape ``(B, n, r)``.
    """
    Bn, n = diag.shape
    ab = np.zeros((3, Bn * n))
    up = upper.copy()
    up[:, -1] = 0.0
    lo = lower.copy()
    lo[:, 0] = 0.0
    ab[0, 1:] = up.reshape(-1)[:-1]
    ab[1] = diag.reshape(-1)
    ab[2, :-1] = lo.reshape(-1)[1:]
    sol = scipy.linalg.solve_banded((1, 1), ab, rhs.reshape(Bn * n, -1), check_finite=False)
    return sol.reshape(Bn, n, -1)


def cyclic_tridiag_solve(lower, diag, upper, rhs) -> np.ndarray:
    """Solve periodic tridiagonal systems, batched over leading axes.

    Row ``k`` reads ``lower[k] x[k-1] + diag[k] x[k] + upper[k] x[k+1] = rhs[k]``
    with indices taken modulo ``n`` (so ``lower[0]`` and ``upper[n-1]`` are the
    corner entries).
    """
    rhs = np.asarray(rhs, dtype=float)
    shape = rhs.shape
    n = shape[-1]
    if n < 3:
        raise ArgumentError("cyclic tridiagonal solve needs n >= 3")
    lo = np.broadcast_to(lower, shape).reshape(-1, n)
    dg = np.broadcast_to(diag, shape).reshape(-1, n).copy()
    upr = np.broadcast_to(upper, shape).reshape(-1, n)
    r = rhs.reshape(-1, n)
    alpha = upr[:, -1]  # entry (n-1, 0)
    beta = lo[:, 0]  # entry (0, n-1)
    gamma = -dg[:, 0]
    gamma = np.where(gamma == 0.0, -1.0, gamma)
    dg[:, 0] -= gamma
    dg[:, -1] -= alpha * beta / gamma
    uvec = np.zeros_like(r)
    uvec[:, 0] = gamma
    uvec[:, -1] = alpha
    both = _batched_banded(lo, dg, upr, np.stack([r, uvec], axis=-1))
    y, z = both[..., 0], both[..., 1]
    fact_y = y[:, 0] + beta / gamma * y[:, -1]
    fact_z = z[:, 0] + beta / gamma * z[:, -1]
    denom = 1.0 + fact_z
    with np.errstate(all="ignore"):
        x = y - (fact_y / denom)[:, None] * z
    if not np.all(np.isfinite(x)):
        raise NumericalError(
            f"singular periodic tridiagonal system (min |1+v.z| = {np.min(np.abs(denom)):.3e})"
        )
    return x.reshape(shape)


def _implicit_1d(op: LocalOperatorSlice, rhs: np.ndarray, dt: float, theta: float, dy: float):
    A = np.broadcast_to(op.diffusion[0, 0], rhs.shape)
    B = np.broadcast_to(op.drift[0], rhs.shape)
    C = np.broadcast_to(op.reaction, rhs.shape)
    w = theta * dt
    lower = -w * (A / dy**2 - B / (2.0 * dy))
    diag = 1.0 - w * (-2.0 * A / dy**2 + C)
    upper = -w * (A / dy**2 + B / (2.0 * dy))
    x = cyclic_tridiag_solve(lower, diag, upper, rhs)
    res = diag * x + lower * np.roll(x, 1, axis=-1) + upper * np.roll(x, -1, axis=-1) - rhs
    scale = max(float(np.max(np.abs(rhs))), 1e-300)
    if float(np.max(np.abs(res))) > 1e-9 * scale + 1e-300 and float(np.max(np.abs(res))) > 1e-12:
        raise NumericalError(f"ill-conditioned slice system: relative residual {np.max(np.abs(res)) / scale:.3e}")
    return x


def _implicit_2d(op: LocalOperatorSlice, rhs: np.ndarray, dt: float, theta: float, dy: float):
    shape = rhs.shape
    n = shape[-1]
    batch = int(np.prod(shape[:-2], dtype=int)) if len(shape) > 2 else 1
    N = batch * n * n
    w = theta * dt

    def flat(a):
        return np.broadcast_to(a, shape).reshape(-1)

    A = np.asarray(op.diffusion)
    Bv = np.asarray(op.drift)
    a00, a11 = flat(A[0, 0]), flat(A[1, 1])
    a01 = flat(0.5 * (A[0, 1] + A[1, 0]))
    b0, b1 = flat(Bv[0]), flat(Bv[1])
    c = flat(op.reaction)
    idx = np.arange(N)
    bb, rem = np.divmod(idx, n * n)
    i, j = np.divmod(rem, n)

    def node(di, dj):
        return bb * n * n + ((i + di) % n) * n + (j + dj) % n

    h2 = dy * dy
    entries = [
        ((0, 0), -2.0 * a00 / h2 - 2.0 * a11 / h2 + c),
        ((1, 0), a00 / h2 + b0 / (2 * dy)),
        ((-1, 0), a00 / h2 - b0 / (2 * dy)),
        ((0, 1), a11 / h2 + b1 / (2 * dy)),
        ((0, -1), a11 / h2 - b1 / (2 * dy)),
        ((1, 1), 2.0 * a01 / (4 * h2)),
        ((-1, -1), 2.0 * a01 / (4 * h2)),
        ((1, -1), -2.0 * a01 / (4 * h2)),
        ((-1, 1), -2.0 * a01 / (4 * h2)),
    ]
    rows, cols, vals = [], [], []
    for (di, dj), coef in entries:
        rows.append(idx)
        cols.append(node(di, dj))
        vals.append(-w * coef + (1.0 if (di, dj) == (0, 0) else 0.0))
    M = scipy.sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    r = rhs.reshape(-1)
    try:
        x = scipy.sparse.linalg.splu(M).solve(r)
    except RuntimeError as exc:  # singular factor
        raise NumericalError(f"singular 2-d slice system: {exc}") from exc
    res = M @ x - r
    scale = max(float(np.max(np.abs(r))), 1e-300)
    if not np.all(np.isfinite(x)) or (np.max(np.abs(res)) > 1e-12 * scale and np.max(np.abs(res)) > 1e-13):
        raise NumericalError(f"2-d slice solve residual {np.max(np.abs(res)) / scale:.3e} above 1e-12 relative")
    return x.reshape(shape)


def advance_slice_step(
    state: np.ndarray,
    op: LocalOperatorSlice,
    dt: float,
    theta: float = 0.5,
    op_next: LocalOperatorSlice | None = None,
    dy: float | None = None,
) -> np.ndarray:
    """One theta-scheme step from s_j to s_{j+1}.

    ``op`` holds the coefficients at s_j and ``op_next`` those at s_{j+1}
    (defaults to ``op``).  ``dy`` is the lattice spacing.
    """
    if dy is None:
        raise ArgumentError("advance_slice_step needs the lattice spacing dy")
    if not 0.0 <= theta <= 1.0:
        raise ArgumentError("theta must lie in [0, 1]")
    op_next = op if op_next is None else op_next
    u = np.asarray(state, dtype=float)
    rhs = u + dt * np.asarray(op_next.source) * theta + dt * (1.0 - theta) * np.asarray(op.source)
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * dt * apply_operator(u, op, dy)
    rhs = np.broadcast_to(rhs, u.shape)
    if theta == 0.0:
        return np.array(rhs)
    d = op.d
    if d == 1:
        return _implicit_1d(op_next, rhs, dt, theta, dy)
    if d == 2:
        return _implicit_2d(op_next, rhs, dt, theta, dy)
    raise ArgumentError(f"unsupported dimension {d}")


def solve_parameterized_local(
    ops: LocalOperatorSlice,
    initial: np.ndarray,
    up_to: int,
    dt: float,
    dy: float,
    theta: float = 0.5,
) -> np.ndarray:
    """March a local problem for one fixed t from s=0 to s=tau_{up_to}.

    ``ops`` carries a leading s axis (after the component axes) with at least
    ``up_to + 1`` levels.  Returns the stacked states, shape ``(up_to+1, *space)``.
    """
    u0 = np.asarray(initial, dtype=float)
    if not np.all(np.isfinite(u0)):
        raise ArgumentError("initial data must be finite")
    check_ellipticity(ops.diffusion, "local diffusion")
    out = np.empty((up_to + 1,) + u0.shape)
    out[0] = u0
    for j in range(up_to):
        out[j + 1] = advance_slice_step(out[j], ops.at(j), dt, theta, ops.at(j + 1), dy=dy)
    return out
