"""Run configuration: JSON documents, presets and expression-built problems.

A configuration is a JSON object::

    {
      "mode": "solve-linear",
      "grid": {"n_time": 64, "n_space": 128, "d": 1, "T": 1.0, "L": 6.283185307179586},
      "tolerance": 1e-8, "max_iter": 200, "contraction_cap": 0.9,
      "alpha": 0.5, "theta": 0.5, "seed": 0, "output": "out", "refine": 0,
      "problem": {"preset": "linear-manufactured"},
      "fbsde": {"n_paths": 10000, "n_steps": 256, "b": "0", "sigma": "1", "y0": null}
    }

``problem`` holds either a preset name or exactly one of ``linear``,
``nonlinear``, ``control`` or ``field``, optionally with ``u_star`` (an
exact solution in ``t, s, y`` from which the source and initial data are
manufactured).  Expressions are strings in the grammar of :mod:`.expr`.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .expr import ExprFn, manufacture_source, variables_for
from .grid import TriangleGrid, build_grid
from .hjb import ControlProblem
from .linear import LinearCoefficients
from .nonlinear import NonlinearProblem

MODES = ("solve-linear", "solve-nonlinear", "solve-hjb", "verify-fbsde", "manufacture", "norms")

PRESETS: dict[str, dict] = {
    "linear-manufactured": {"linear": {"a": "1", "abar": "0.2"}, "u_star": "exp(t-s)*(2+sin(y))"},
    "linear-heat": {"linear": {"a": "1"}, "u_star": "exp(-s)*sin(y)"},
    "nonelliptic": {"linear": {"a": "-1", "g": "sin(y)"}},
    "nonlinear-manufactured": {"nonlinear": {"F": "q + 0.1*n/(1+n^2)"}, "u_star": "exp(t-s)*(2+sin(y))"},
    "hjb-lq": {
        "control": {
            "b": "a",
            "sigma": "0.8",
            "h": "exp(-0.5*(s-t))*a^2",
            "g": "exp(-0.5*(1-t))*(1-cos(y-t))",
            "argmin": "-p*exp(0.5*(s-t))/2",
            "bounds": [[-10.0, 10.0]],
        }
    },
}

_LINEAR_SLOTS = ("a", "abar", "b", "bbar", "c", "cbar", "f", "g", "g_t")
_CONTROL_SLOTS = ("b", "sigma", "h", "g", "argmin", "bounds", "resolution", "m", "k", "negate_costs")
_PROBLEM_KINDS = ("linear", "nonlinear", "control", "field")


@dataclass
class GridSpec:
    n_time: int = 64
    n_space: int = 128
    d: int = 1
    T: float = 1.0
    L: float = 2.0 * math.pi

    def build(self, refine: int = 0) -> TriangleGrid:
        g = build_grid(self.n_time, self.d, self.n_space, self.T, self.L)
        return g.refine(refine) if refine else g


@dataclass
class FBSDESpec:
    n_paths: int = 10000
    n_steps: int = 256
    b: Any = "0"
    sigma: Any = "1"
    y0: Any = None
    chunk: int = 2048


@dataclass
class RunConfig:
    mode: str = "solve-linear"
    grid: GridSpec = field(default_factory=GridSpec)
    tolerance: float = 1e-8
    max_iter: int = 200
    contraction_cap: float = 0.9
    alpha: float = 0.5
    theta: float = 0.5
    seed: int = 0
    output: str = "out"
    refine: int = 0
    problem: dict = field(default_factory=lambda: {"preset": "linear-manufactured"})
    fbsde: FBSDESpec = field(default_factory=FBSDESpec)

    def to_dict(self) -> dict:
        return asdict(self)


# -- loading and validation ---------------------------------------------------------


def _reject_unknown(data: dict, allowed, where: str):
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigurationError(f"unknown key {extra[0]!r} in {where}")


def _typed(value, kind, key):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigurationError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key} must be a string")
        return value
    return value


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object")
    _reject_unknown(data, [f.name for f in fields(cls)], where)
    kinds = {f.name: f.type for f in fields(cls)}
    kw = {}
    for k, v in data.items():
        kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kinds[k], None)
        kw[k] = _typed(v, kind, f"{where}.{k}") if kind else v
    return cls(**kw)


def _validate_problem(problem, d: int):
    if not isinstance(problem, dict):
        raise ConfigurationError("problem must be an object")
    _reject_unknown(problem, ("preset", "u_star") + _PROBLEM_KINDS, "problem")
    if "preset" in problem:
        if set(problem) != {"preset"}:
            raise ConfigurationError("problem.preset cannot be combined with other problem keys")
        if problem["preset"] not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {problem['preset']!r} (known: {', '.join(sorted(PRESETS))})"
            )
        if d != 1:
            raise ConfigurationError("presets are defined for d = 1 only")
        return
    kinds = [k for k in _PROBLEM_KINDS if k in problem]
    if len(kinds) != 1:
        raise ConfigurationError("problem needs exactly one of preset, linear, nonlinear, control, field")
    body = problem[kinds[0]]
    if kinds[0] == "field":
        ExprFn.parse(body, variables_for(d, "t", "s", "y"), d, "problem.field")
        return
    if not isinstance(body, dict):
        raise ConfigurationError(f"problem.{kinds[0]} must be an object")
    allowed = {"linear": _LINEAR_SLOTS, "nonlinear": ("F", "g", "g_t"), "control": _CONTROL_SLOTS}[kinds[0]]
    _reject_unknown(body, allowed, f"problem.{kinds[0]}")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.mode not in MODES:
        raise ConfigurationError(f"unknown mode {cfg.mode!r} (expected one of {', '.join(MODES)})")
    if not cfg.tolerance > 0:
        raise ConfigurationError("tolerance must be positive")
    if cfg.max_iter < 1:
        raise ConfigurationError("max_iter must be at least 1")
    if not 0.0 < cfg.contraction_cap < 1.0:
        raise ConfigurationError("contraction_cap must lie in (0, 1)")
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if not 0.0 <= cfg.theta <= 1.0:
        raise ConfigurationError("theta must lie in [0, 1]")
    if cfg.refine < 0:
        raise ConfigurationError("refine must be >= 0")
    if cfg.seed < 0:
        raise ConfigurationError("seed must be >= 0")
    g = cfg.grid
    if g.d not in (1, 2):
        raise ConfigurationError(f"grid.d must be 1 or 2, got {g.d}")
    try:
        g.build()
    except Exception as exc:
        raise ConfigurationError(f"invalid grid: {exc}") from None
    fb = cfg.fbsde
    if fb.n_paths < 2 or fb.n_steps < 1 or fb.chunk < 1:
        raise ConfigurationError("fbsde.n_paths must be >= 2 and fbsde.n_steps, fbsde.chunk >= 1")
    _validate_problem(cfg.problem, g.d)
    # build once so that expression errors surface at load time
    try:
        build_problem(cfg)
    except ArgumentError as exc:
        raise ConfigurationError(f"problem: {exc}") from None
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a JSON object")
    top = [f.name for f in fields(RunConfig)]
    _reject_unknown(data, top, "configuration")
    kw: dict[str, Any] = {}
    for key, kind in (("mode", str), ("tolerance", float), ("max_iter", int), ("contraction_cap", float),
                      ("alpha", float), ("theta", float), ("seed", int), ("output", str), ("refine", int)):
        if key in data:
            kw[key] = _typed(data[key], kind, key)
    kw["grid"] = _section(GridSpec, data.get("grid"), "grid")
    kw["fbsde"] = _section(FBSDESpec, data.get("fbsde"), "fbsde")
    if "problem" in data:
        kw["problem"] = copy.deepcopy(data["problem"])
    return validate(RunConfig(**kw))


def load_problem_config(path) -> RunConfig:
    """Read and validate a JSON configuration file; defaults are filled in."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {p}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


# -- building problems from expressions ----------------------------------------------


def resolve_problem(problem: dict, d: int) -> dict:
    """Replace a preset by its payload."""
    return copy.deepcopy(PRESETS[problem["preset"]]) if "preset" in problem else problem


def problem_kind(problem: dict) -> str:
    p = resolve_problem(problem, 1)
    return next(k for k in _PROBLEM_KINDS if k in p)


def _parse(text, variables, d, slot) -> ExprFn:
    return ExprFn.parse(text, variables, d, slot)


def _tsy(d):
    return variables_for(d, "t", "s", "y")


def _coef_expr(entry, d, slot):
    """Expression(s) for a coefficient slot; matrix and vector slots may be nested lists."""
    if isinstance(entry, list):
        return [_coef_expr(x, d, f"{slot}[{i}]") for i, x in enumerate(entry)]
    return _parse(entry, _tsy(d), d, slot)


def _as_callable(e, names):
    """Numbers stay numbers; expressions become positional callables."""
    if isinstance(e, list):
        return [_as_callable(x, names) for x in e]
    if not e.free:
        return float(e())
    return e.as_function(*names)


def _diff(e, name):
    if isinstance(e, list):
        return [_diff(x, name) for x in e]
    return e.diff(name)


@dataclass
class BuiltProblem:
    """A problem assembled from a configuration, with its exact solution if known."""

    kind: str
    linear: LinearCoefficients | None = None
    nonlinear: NonlinearProblem | None = None
    control: ControlProblem | None = None
    field: ExprFn | None = None
    u_star: ExprFn | None = None
    source: ExprFn | None = None

    def exact(self, grid: TriangleGrid):
        """``u*`` and ``u*_t`` sampled on the grid, or ``None``."""
        if self.u_star is None:
            return None
        t, s, ys = grid.ts_mesh()
        names = _tsy(grid.d)
        vals = dict(zip(names, (t, s) + tuple(ys)))
        u = np.broadcast_to(self.u_star(**{k: vals[k] for k in self.u_star.free}), grid.shape)
        ut = self.u_star.diff("t")
        v = np.broadcast_to(ut(**{k: vals[k] for k in ut.free}), grid.shape)
        return np.array(u), np.array(v)


def _initial_from_u_star(u_star: ExprFn, d):
    ys = variables_for(d, "y")
    g = u_star.subs({"s": 0}, ("t",) + ys)
    return g, g.diff("t")


def _linear_exprs(body: dict, d: int):
    out = {}
    for k in ("a", "abar", "b", "bbar", "c", "cbar", "f"):
        if k in body:
            out[k] = _coef_expr(body[k], d, f"linear.{k}")
    return out


def _build_linear(body, u_star, d) -> tuple[LinearCoefficients, ExprFn | None]:
    names = _tsy(d)
    gnames = ("t",) + variables_for(d, "y")
    ex = _linear_exprs(body, d)
    source = None
    if u_star is not None:
        if "f" in ex:
            raise ConfigurationError("linear.f cannot be given together with u_star")
        source = manufacture_source(u_star, {k: v for k, v in ex.items() if k != "f"}, d)
        ex["f"] = source
    kw = {}
    for k, e in ex.items():
        kw[k] = _as_callable(e, names)
        kw[k + "_t"] = _as_callable(_diff(e, "t"), names)
    if u_star is not None:
        if "g" in body or "g_t" in body:
            raise ConfigurationError("linear.g cannot be given together with u_star")
        g, g_t = _initial_from_u_star(u_star, d)
    else:
        g = _parse(body.get("g", "0"), gnames, d, "linear.g")
        g_t = _parse(body["g_t"], gnames, d, "linear.g_t") if "g_t" in body else g.diff("t")
    kw["g"] = _as_callable(g, gnames)
    kw["g_t"] = _as_callable(g_t, gnames)
    return LinearCoefficients(**kw), source


def _state_names(d):
    return variables_for(d, "t", "s", "y", "u", "p", "q", "l", "m", "n")


def _bind_state(e: ExprFn, d: int):
    """Callable ``(t, s, y, u, p, q, l, m, n)`` in component-first convention."""
    free = e.free
    if not free:
        val = float(e())
        return lambda *args: np.asarray(val)

    def fn(t, s, y, u, p, q, l, m, n):
        vals = {"t": t, "s": s, "u": u, "l": l}
        if d == 1:
            vals.update(y=y, p=p, q=q, m=m, n=n)
        else:
            for k in range(d):
                vals[f"y{k + 1}"], vals[f"p{k + 1}"], vals[f"m{k + 1}"] = y[k], p[k], m[k]
                for j in range(d):
                    vals[f"q{k + 1}{j + 1}"], vals[f"n{k + 1}{j + 1}"] = q[k, j], n[k, j]
        return e(**{k: vals[k] for k in free})

    return fn


def _stack_closures(fns, shape_d, kind):
    if kind == 1:
        def c(*args):
            vals = [f(*args) for f in fns]
            return np.stack(np.broadcast_arrays(*vals))
        return c

    def c(*args):
        vals = np.broadcast_arrays(*[f(*args) for f in fns])
        return np.stack(vals).reshape((shape_d, shape_d) + vals[0].shape)
    return c


def _build_nonlinear(body, u_star, d) -> tuple[NonlinearProblem, ExprFn | None]:
    names = _state_names(d)
    gnames = ("t",) + variables_for(d, "y")
    if "F" not in body:
        raise ConfigurationError("problem.nonlinear needs an F expression")
    F = _parse(body["F"], names, d, "nonlinear.F")
    source = None
    if u_star is not None:
        source = manufacture_source(u_star, F, d)
        F = ExprFn.from_sympy(F.expr + source.expr, names)
        if "g" in body or "g_t" in body:
            raise ConfigurationError("nonlinear.g cannot be given together with u_star")
        g, g_t = _initial_from_u_star(u_star, d)
    else:
        g = _parse(body.get("g", "0"), gnames, d, "nonlinear.g")
        g_t = _parse(body["g_t"], gnames, d, "nonlinear.g_t") if "g_t" in body else g.diff("t")
    kw = {"F_t": _bind_state(F.diff("t"), d), "F_u": _bind_state(F.diff("u"), d),
          "F_l": _bind_state(F.diff("l"), d)}
    for vec_slot, mat_slot in (("p", "q"), ("m", "n")):
        if d == 1:
            kw["F_" + vec_slot] = _bind_state(F.diff(vec_slot), d)
            kw["F_" + mat_slot] = _bind_state(F.diff(mat_slot), d)
        else:
            kw["F_" + vec_slot] = _stack_closures(
                [_bind_state(F.diff(f"{vec_slot}{k + 1}"), d) for k in range(d)], d, 1)
            sym = []
            for k in range(d):
                for j in range(d):
                    a = F.diff(f"{mat_slot}{k + 1}{j + 1}")
                    b = F.diff(f"{mat_slot}{j + 1}{k + 1}")
                    sym.append(_bind_state(ExprFn.from_sympy((a.expr + b.expr) / 2, names), d))
            kw["F_" + mat_slot] = _stack_closures(sym, d, 2)
    prob = NonlinearProblem(
        F=_bind_state(F, d), g=_as_callable(g, gnames), g_t=_as_callable(g_t, gnames), d=d, **kw
    )
    return prob, source


def _control_vars(d, m, *groups):
    out = []
    for grp in groups:
        if grp == "a":
            out.extend(["a"] if m == 1 else [f"a{k + 1}" for k in range(m)])
        else:
            out.extend(variables_for(d, grp))
    return tuple(out)


def _bind_control(e: ExprFn, d: int, m: int, lead: tuple):
    """Callable in the control module's convention: ``fn(*lead, y, a)`` or ``fn(*lead, y, p, q)``."""
    free = e.free

    def fn(*args):
        vals = dict(zip(lead, args[: len(lead)]))
        rest = args[len(lead):]
        groups = ("y", "a") if "a" in e.variables or "a1" in e.variables else ("y", "p", "q")
        for grp, arr in zip(groups, rest):
            if grp == "a":
                if m == 1:
                    vals["a"] = arr
                else:
                    for k in range(m):
                        vals[f"a{k + 1}"] = arr[k]
            elif grp == "q":
                if d == 1:
                    vals["q"] = arr
                else:
                    for k in range(d):
                        for j in range(d):
                            vals[f"q{k + 1}{j + 1}"] = arr[k, j]
            else:
                if d == 1:
                    vals[grp] = arr
                else:
                    for k in range(d):
                        vals[f"{grp}{k + 1}"] = arr[k]
        return e(**{k: vals[k] for k in free})

    return fn


def _vector_fn(exprs, d, m, lead, rows, cols=None):
    fns = [_bind_control(e, d, m, lead) for e in exprs]

    def fn(*args):
        vals = np.broadcast_arrays(*[np.asarray(f(*args), dtype=float) for f in fns])
        out = np.stack(vals)
        return out if cols is None else out.reshape((rows, cols) + vals[0].shape)

    return fn


def _build_control(body, d, T) -> ControlProblem:
    m = _typed(body.get("m", 1), int, "control.m")
    k = _typed(body.get("k", d), int, "control.k")
    for slot in ("b", "sigma", "h", "g"):
        if slot not in body:
            raise ConfigurationError(f"problem.control needs a {slot!r} expression")
    by = _control_vars(d, m, "s", "y", "a")
    hv = _control_vars(d, m, "t", "s", "y", "a")

    def parse_slot(slot, variables, shape):
        entry = body[slot]
        if shape is None:
            return _parse(entry, variables, d, f"control.{slot}")
        flat = entry if isinstance(entry, list) else None
        if flat is None:
            raise ConfigurationError(f"control.{slot} must be a list for this dimension")
        if shape == 2:
            flat = [x for row in entry for x in row]
        return [_parse(x, variables, d, f"control.{slot}") for x in flat]

    if d == 1:
        b = _bind_control(parse_slot("b", by, None), d, m, ("s",))
    else:
        b = _vector_fn(parse_slot("b", by, 1), d, m, ("s",), d)
    if d == 1 and k == 1:
        sigma = _bind_control(parse_slot("sigma", by, None), d, m, ("s",))
    else:
        sigma = _vector_fn(parse_slot("sigma", by, 2), d, m, ("s",), d, k)
    h = _bind_control(parse_slot("h", hv, None), d, m, ("t", "s"))
    gexpr = _parse(body["g"], ("t",) + variables_for(d, "y"), d, "control.g")
    argmin = None
    if "argmin" in body:
        av = _control_vars(d, m, "t", "s", "y", "p", "q")
        entry = body["argmin"]
        if m == 1:
            argmin = _bind_control(_parse(entry, av, d, "control.argmin"), d, m, ("t", "s"))
        else:
            argmin = _vector_fn([_parse(x, av, d, "control.argmin") for x in entry], d, m, ("t", "s"), m)
    bounds = body.get("bounds")
    if bounds is not None:
        if not isinstance(bounds, list) or not all(isinstance(x, list) and len(x) == 2 for x in bounds):
            raise ConfigurationError("control.bounds must be a list of [low, high] pairs")
    return ControlProblem(
        b=b, sigma=sigma, h=h, g=gexpr.as_function("t", *variables_for(d, "y")), T=T, d=d, m=m, k=k,
        bounds=bounds, resolution=_typed(body.get("resolution", 64), int, "control.resolution"),
        argmin=argmin, g_t=gexpr.diff("t").as_function("t", *variables_for(d, "y")),
        negate_costs=_typed(body.get("negate_costs", False), bool, "control.negate_costs"),
    )


def build_problem(cfg: RunConfig) -> BuiltProblem:
    d = cfg.grid.d
    p = resolve_problem(cfg.problem, d)
    kind = next(k for k in _PROBLEM_KINDS if k in p)
    u_star = _parse(p["u_star"], _tsy(d), d, "problem.u_star") if "u_star" in p else None
    if kind == "linear":
        lin, src = _build_linear(p["linear"], u_star, d)
        return BuiltProblem(kind, linear=lin, u_star=u_star, source=src)
    if kind == "nonlinear":
        nl, src = _build_nonlinear(p["nonlinear"], u_star, d)
        return BuiltProblem(kind, nonlinear=nl, u_star=u_star, source=src)
    if kind == "control":
        return BuiltProblem(kind, control=_build_control(p["control"], d, cfg.grid.T), u_star=u_star)
    return BuiltProblem(kind, field=_parse(p["field"], _tsy(d), d, "problem.field"), u_star=u_star)


def manufacture_payload(cfg: RunConfig) -> tuple[ExprFn, Any]:
    """``u*`` and the right-hand side (coefficient dict or F) named by a configuration."""
    d = cfg.grid.d
    p = resolve_problem(cfg.problem, d)
    if "u_star" not in p:
        raise ConfigurationError("manufacture mode needs problem.u_star")
    u_star = _parse(p["u_star"], _tsy(d), d, "problem.u_star")
    if "linear" in p:
        return u_star, {k: v for k, v in _linear_exprs(p["linear"], d).items() if k != "f"}
    if "nonlinear" in p:
        return u_star, _parse(p["nonlinear"]["F"], _state_names(d), d, "nonlinear.F")
    raise ConfigurationError("manufacture mode needs a linear or nonlinear problem")


def sde_coefficients(cfg: RunConfig):
    """Drift, volatility and start points for the forward diffusion."""
    d = cfg.grid.d
    fb = cfg.fbsde
    names = ("s",) + variables_for(d, "y")

    def coef(entry, slot, shape):
        if isinstance(entry, (int, float)) and not isinstance(entry, bool):
            return float(entry)
        if isinstance(entry, list):
            flat = [x for row in entry for x in row] if shape == 2 else entry
            exprs = [_parse(x, names, d, f"fbsde.{slot}") for x in flat]
            if all(not e.free for e in exprs):
                arr = np.array([float(e()) for e in exprs])
                return arr.reshape((d, -1)) if shape == 2 else arr
            fns = [e.as_function(*names) for e in exprs]

            def fn(s, y):
                ys = (y,) if d == 1 else tuple(y)
                vals = np.broadcast_arrays(*[np.asarray(f(s, *ys), dtype=float) for f in fns])
                out = np.stack(vals)
                return out.reshape((d, -1) + vals[0].shape) if shape == 2 else out
            return fn
        e = _parse(entry, names, d, f"fbsde.{slot}")
        if not e.free:
            return float(e())
        f = e.as_function(*names)
        return lambda s, y: f(s, *((y,) if d == 1 else tuple(y)))

    b = coef(fb.b, "b", 1)
    sigma = coef(fb.sigma, "sigma", 2)
    if fb.y0 is None:
        # spread the start points over the torus so every cell is visited
        y0 = (np.arange(fb.n_paths) + 0.5) * cfg.grid.L / fb.n_paths
        if d > 1:
            # golden-ratio offsets keep the second coordinate from repeating the first
            frac = np.mod(np.arange(fb.n_paths) * 0.6180339887498949 + 0.5 / fb.n_paths, 1.0)
            y0 = np.stack([y0, frac * cfg.grid.L], axis=1)
    else:
        y0 = np.asarray(fb.y0, dtype=float)
    return b, sigma, y0
