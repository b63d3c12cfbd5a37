"""A small arithmetic expression language with exact differentiation.

Grammar (usual precedence, ``^`` and ``**`` right-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom (('^' | '**') unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Functions: sin, cos, exp, log, tanh (plus sqrt, which sympy emits when it
prints derived expressions).  Constants: pi.  The parser is hand written so
that error messages carry a column; parsed trees are converted to sympy
expressions, which provide differentiation and numpy code generation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import sympy as sp

from .errors import ArgumentError, ConfigurationError, ManufactureError

_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "log": sp.log, "tanh": sp.tanh, "sqrt": sp.sqrt}
_CONSTS = {"pi": sp.pi, "E": sp.E}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>\*\*|[-+*/^(),]))"
)


class ExpressionError(ConfigurationError):
    def __init__(self, message: str, text: str, column: int, slot: str | None = None):
        where = f" in slot {slot!r}" if slot else ""
        super().__init__(f"{message}{where} at column {column}: {text!r}")
        self.column = column
        self.text = text


def variables_for(d: int, *groups: str) -> tuple[str, ...]:
    """Canonical variable names for the given argument groups.

    Groups: ``t s u l`` (scalars), ``y p m`` (vectors), ``q n`` (matrices),
    ``a`` (control, scalar for this helper).  For ``d = 1`` the plain letter
    is canonical; for ``d = 2`` indexed names such as ``y1, q12`` are used.
    """
    out: list[str] = []
    for grp in groups:
        if grp in ("t", "s", "u", "l", "a"):
            out.append(grp)
        elif grp in ("y", "p", "m"):
            out.extend([grp] if d == 1 else [f"{grp}{k + 1}" for k in range(d)])
        elif grp in ("q", "n"):
            out.extend([grp] if d == 1 else [f"{grp}{k + 1}{l + 1}" for k in range(d) for l in range(d)])
        else:
            raise ArgumentError(f"unknown variable group {grp!r}")
    return tuple(out)


def _aliases(d: int) -> dict[str, str]:
    if d != 1:
        return {}
    return {"y1": "y", "p1": "p", "m1": "m", "q11": "q", "n11": "n", "a1": "a"}


class _Parser:
    def __init__(self, text: str, allowed: set[str], aliases: Mapping[str, str], slot: str | None):
        self.text = text
        self.allowed = allowed
        self.aliases = aliases
        self.slot = slot
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _error(self, msg, col):
        raise ExpressionError(msg, self.text, col, self.slot)

    def _tokenize(self, text):
        toks = []
        i = 0
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            m = _TOKEN.match(text, i)
            if not m or m.end() == i:
                self._error(f"unexpected character {text[i]!r}", i + 1)
            kind = m.lastgroup
            start = m.start(kind)
            toks.append((kind, m.group(kind), start + 1))
            i = m.end()
        toks.append(("end", "", len(text) + 1))
        return toks

    def peek(self):
        return self.tokens[self.pos]

    def take(self, value=None):
        tok = self.tokens[self.pos]
        if value is not None and tok[1] != value:
            self._error(f"expected {value!r} but found {tok[1] or 'end of input'!r}", tok[2])
        self.pos += 1
        return tok

    def parse(self):
        if self.peek()[0] == "end":
            self._error("empty expression", 1)
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            self._error(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = node + rhs if op == "+" else node - rhs
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = node * rhs if op == "*" else node / rhs
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, val, col = self.take()
        if kind == "num":
            return sp.Rational(val) if re.fullmatch(r"\d+", val) else sp.Float(val, 17)
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in _FUNCS:
                    self._error(f"unknown function {val!r}", col)
                self.take("(")
                arg = self.expr()
                self.take(")")
                return _FUNCS[val](arg)
            if val in _CONSTS:
                return _CONSTS[val]
            name = self.aliases.get(val, val)
            if name not in self.allowed:
                self._error(f"variable {val!r} is not allowed here (allowed: {', '.join(sorted(self.allowed))})", col)
            return sp.Symbol(name, real=True)
        if val == "(":
            node = self.expr()
            self.take(")")
            return node
        self._error(f"unexpected token {val or 'end of input'!r}", col)


@dataclass(eq=False)
class ExprFn:
    """Parsed expression with a fixed set of admissible variables."""

    text: str
    expr: sp.Expr
    variables: tuple[str, ...]
    _compiled: dict = field(default_factory=dict, repr=False)

    @classmethod
    def parse(cls, text: str, variables: Iterable[str], d: int = 1, slot: str | None = None) -> "ExprFn":
        if not isinstance(text, str):
            if isinstance(text, (int, float)) and not isinstance(text, bool):
                text = repr(float(text))
            else:
                raise ConfigurationError(f"expression{' for ' + slot if slot else ''} must be a string or number")
        variables = tuple(variables)
        node = _Parser(text, set(variables), _aliases(d), slot).parse()
        return cls(text, sp.sympify(node), variables)

    @classmethod
    def from_sympy(cls, expr, variables: Iterable[str]) -> "ExprFn":
        variables = tuple(variables)
        return cls(sp.sstr(expr), expr, variables)

    @property
    def free(self) -> set[str]:
        return {str(x) for x in self.expr.free_symbols}

    def symbol(self, name: str) -> sp.Symbol:
        return sp.Symbol(name, real=True)

    def diff(self, name: str) -> "ExprFn":
        return ExprFn.from_sympy(sp.diff(self.expr, self.symbol(name)), self.variables)

    def subs(self, mapping: Mapping[str, object], variables: Iterable[str] | None = None) -> "ExprFn":
        repl = {}
        for k, v in mapping.items():
            repl[self.symbol(k)] = v.expr if isinstance(v, ExprFn) else sp.sympify(v)
        return ExprFn.from_sympy(self.expr.xreplace(repl), self.variables if variables is None else variables)

    def is_zero(self) -> bool:
        return sp.simplify(self.expr) == 0

    def _fn(self, names: tuple[str, ...]):
        fn = self._compiled.get(names)
        if fn is None:
            fn = sp.lambdify([self.symbol(n) for n in names], self.expr, modules="numpy")
            self._compiled[names] = fn
        return fn

    def __call__(self, **values):
        missing = self.free - set(values)
        if missing:
            raise ArgumentError(f"missing values for variables {sorted(missing)} in {self.text!r}")
        names = tuple(sorted(values))
        args = [np.asarray(values[n], dtype=float) for n in names]
        with np.errstate(all="ignore"):
            out = np.asarray(self._fn(names)(*args), dtype=float)
        shape = np.broadcast_shapes(*(a.shape for a in args)) if args else ()
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, shape))

    def as_function(self, *names: str):
        """Positional callable ``fn(*arrays)`` bound to ``names``."""
        names = tuple(names)
        extra = self.free - set(names)
        if extra:
            raise ArgumentError(f"expression {self.text!r} uses {sorted(extra)} beyond {names}")

        def fn(*args):
            return self(**dict(zip(names, args)))

        fn.expr_fn = self
        fn.names = names
        return fn

    def __str__(self) -> str:
        return self.text


def _check_smooth(expr: sp.Expr, what: str):
    bad = expr.atoms(sp.Derivative, sp.Subs) or expr.has(sp.zoo, sp.nan, sp.oo, -sp.oo)
    if bad:
        raise ManufactureError(f"{what} is not differentiable symbolically")
    if expr.has(sp.Abs, sp.sign, sp.Heaviside, sp.DiracDelta, sp.Piecewise):
        raise ManufactureError(f"{what} contains a non-smooth function")


def manufacture_source(u_star: ExprFn, rhs, d: int = 1) -> ExprFn:
    """Source ``f`` such that ``u_star`` solves ``u_s = RHS(u) + f`` exactly.

    ``rhs`` is either an :class:`ExprFn` ``F(t,s,y,u,p,q,l,m,n)`` (fully
    nonlinear case, ``f = d_s u* - F(u*)``) or a mapping of linear
    coefficient expressions in ``(t, s, y)`` with keys among
    ``a, abar, b, bbar, c, cbar`` (matrix entries as nested lists for
    ``d = 2``).  Diagonal terms are obtained by substituting ``t := s``.
    """
    ys = variables_for(d, "y")
    base_vars = ("t", "s") + ys
    extra = u_star.free - set(base_vars)
    if extra:
        raise ManufactureError(f"u* may only depend on t, s, y; found {sorted(extra)}")
    T, S = sp.Symbol("t", real=True), sp.Symbol("s", real=True)
    Y = [sp.Symbol(n, real=True) for n in ys]
    U = u_star.expr
    _check_smooth(U, "u*")
    try:
        Us = sp.diff(U, S)
        Uy = [sp.diff(U, yk) for yk in Y]
        Uyy = [[sp.diff(U, yk, yl) for yl in Y] for yk in Y]
    except Exception as exc:  # sympy raises assorted types on bad input
        raise ManufactureError(f"cannot differentiate u*: {exc}") from exc

    def diag(e):
        return e.xreplace({T: S})

    if isinstance(rhs, ExprFn):
        names = {}
        names["t"], names["s"], names["u"], names["l"] = T, S, U, diag(U)
        for k, n in enumerate(variables_for(d, "y")):
            names[n] = Y[k]
        for k, n in enumerate(variables_for(d, "p")):
            names[n] = Uy[k]
        for k, n in enumerate(variables_for(d, "m")):
            names[n] = diag(Uy[k])
        qn = variables_for(d, "q")
        nn = variables_for(d, "n")
        for idx, (a_, b_) in enumerate((k, l) for k in range(d) for l in range(d)):
            names[qn[idx]] = Uyy[a_][b_]
            names[nn[idx]] = diag(Uyy[a_][b_])
        repl = {sp.Symbol(k, real=True): v for k, v in names.items()}
        Fv = rhs.expr.xreplace(repl)
        f = Us - Fv
    else:
        coeffs = dict(rhs)
        unknown = set(coeffs) - {"a", "abar", "b", "bbar", "c", "cbar"}
        if unknown:
            raise ManufactureError(f"unknown coefficient keys {sorted(unknown)}")

        def e(v):
            if isinstance(v, ExprFn):
                if v.free - set(base_vars):
                    raise ManufactureError(f"coefficient {v.text!r} may only depend on t, s, y")
                return v.expr
            return sp.sympify(v)

        def mat(key):
            v = coeffs.get(key, 0)
            if isinstance(v, (list, tuple)):
                return [[e(x) for x in row] for row in v]
            return [[e(v) if k == l else sp.Integer(0) for l in range(d)] for k in range(d)]

        def vec(key):
            v = coeffs.get(key, 0)
            if isinstance(v, (list, tuple)):
                return [e(x) for x in v]
            return [e(v)] * d

        a, abar, b, bbar = mat("a"), mat("abar"), vec("b"), vec("bbar")
        c, cbar = e(coeffs.get("c", 0)), e(coeffs.get("cbar", 0))
        local = sum(a[k][l] * Uyy[k][l] for k in range(d) for l in range(d)) + sum(
            b[k] * Uy[k] for k in range(d)
        ) + c * U
        nonlocal_ = sum(abar[k][l] * diag(Uyy[k][l]) for k in range(d) for l in range(d)) + sum(
            bbar[k] * diag(Uy[k]) for k in range(d)
        ) + cbar * diag(U)
        f = Us - local - nonlocal_
    _check_smooth(f, "manufactured source")
    return ExprFn.from_sympy(f, base_vars)


def _fd1(fn, x, h):
    return (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)


def _fd2(fn, x, h):
    return (-fn(x + 2 * h) + 16 * fn(x + h) - 30 * fn(x) + 16 * fn(x - h) - fn(x - 2 * h)) / (12 * h * h)


def spot_check_source(u_star: ExprFn, rhs, f: ExprFn, d: int = 1, n: int = 100, seed: int = 0,
                      h: float = 1e-3, T: float = 1.0, L: float = 2 * np.pi) -> float:
    """Largest deviation of ``f`` from a finite-difference reconstruction at random nodes.

    Derivatives of ``u*`` are rebuilt with fourth-order central differences,
    so the result measures mistakes in the symbolic path rather than
    truncation error (which is far below the usual 1e-6 threshold).
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, T, n)
    s = rng.uniform(0, 1, n) * t
    y = rng.uniform(0, L, (d, n))
    ys = variables_for(d, "y")

    def u_at(tt, ss, yy):
        vals = {"t": tt, "s": ss}
        vals.update({name: yy[k] for k, name in enumerate(ys)})
        return np.asarray(u_star(**{k: vals[k] for k in u_star.free}), dtype=float) + 0 * tt

    def shifted(k, tt, ss):
        def fn(x):
            yy = y.copy()
            yy[k] = x
            return u_at(tt, ss, yy)
        return fn

    def derivs(tt, ss):
        u = u_at(tt, ss, y)
        p = [_fd1(shifted(k, tt, ss), y[k], h) for k in range(d)]
        q = [[None] * d for _ in range(d)]
        for k in range(d):
            q[k][k] = _fd2(shifted(k, tt, ss), y[k], h)
            for j in range(k + 1, d):
                def dk(x, k=k, j=j):
                    yy = y.copy()
                    yy[j] = x
                    return _fd1(lambda z: u_at(tt, ss, np.where(np.arange(d)[:, None] == k, z, yy)), y[k], h)
                q[k][j] = q[j][k] = _fd1(dk, y[j], h)
        return u, p, q

    u, p, q = derivs(t, s)
    l, m, nn = derivs(s, s)
    us = _fd1(lambda x: u_at(t, x, y), s, h)
    base = {"t": t, "s": s}
    base.update({name: y[k] for k, name in enumerate(ys)})
    if isinstance(rhs, ExprFn):
        vals = dict(base, u=u, l=l)
        for k, name in enumerate(variables_for(d, "p")):
            vals[name] = p[k]
        for k, name in enumerate(variables_for(d, "m")):
            vals[name] = m[k]
        for idx, (k, j) in enumerate((k, j) for k in range(d) for j in range(d)):
            vals[variables_for(d, "q")[idx]] = q[k][j]
            vals[variables_for(d, "n")[idx]] = nn[k][j]
        r = np.asarray(rhs(**{k: vals[k] for k in rhs.free}), dtype=float)
    else:
        def ev(e):
            if isinstance(e, ExprFn):
                return np.asarray(e(**{k: base[k] for k in e.free}), dtype=float)
            return float(e)

        def mat(key):
            v = rhs.get(key, 0)
            if isinstance(v, (list, tuple)):
                return [[ev(x) for x in row] for row in v]
            return [[ev(v) if k == j else 0.0 for j in range(d)] for k in range(d)]

        def vec(key):
            v = rhs.get(key, 0)
            return [ev(x) for x in v] if isinstance(v, (list, tuple)) else [ev(v)] * d

        a, ab, b, bb = mat("a"), mat("abar"), vec("b"), vec("bbar")
        r = ev(rhs.get("c", 0)) * u + ev(rhs.get("cbar", 0)) * l
        for k in range(d):
            r = r + b[k] * p[k] + bb[k] * m[k]
            for j in range(d):
                r = r + a[k][j] * q[k][j] + ab[k][j] * nn[k][j]
    fv = np.asarray(f(**{k: base[k] for k in f.free}), dtype=float)
    return float(np.max(np.abs(us - r - fv)))
