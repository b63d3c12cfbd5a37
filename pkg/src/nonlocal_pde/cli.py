"""Command line front-end: run a configured solve and write plot-ready artifacts.

    nonlocal-pde --config run.json [--mode MODE] [--out DIR] [--seed N] [--refine K]
    nonlocal-pde --preset hjb-lq --mode solve-hjb --out out/

Artifacts: ``solution.csv`` (columns t, s, y..., u, v at 17 significant
digits), ``solver_report.json``, ``norm_report.json`` and mode-specific
files.  Failures exit with the code of the error class and leave
``error.json`` behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    PRESETS,
    BuiltProblem,
    RunConfig,
    build_problem,
    config_from_dict,
    load_problem_config,
    manufacture_payload,
    sde_coefficients,
    serialize_config,
    validate,
)
from .errors import ConfigurationError, ConsistencyError, ConvergenceError, NonlocalPDEError
from .expr import manufacture_source, spot_check_source
from .fbsde import BackwardField, bsde_residual_stats, evaluate_fk_fields, simulate_forward
from .grid import TriangleGrid
from .hjb import solve_equilibrium_hjb, verify_hjb_system
from .linear import LinearSolution, check_equivalence, solve_linear
from .nonlinear import linear_as_nonlinear, residual_nonlinear, solve_nonlinear
from .norms import HolderConfig, tri_norms_array

__all__ = ["PipelineResult", "run_solver_pipeline", "main", "manufacture_source", "load_problem_config"]

SPOT_CHECK_LIMIT = 1e-6


@dataclass
class PipelineResult:
    status: int
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


# -- writers ---------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _write_csv(path: Path, header, columns) -> Path:
    data = np.column_stack([np.ravel(c) for c in columns]) if columns else np.empty((0, len(header)))
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="")
    return path


def _y_names(d):
    return ["y"] if d == 1 else [f"y{k + 1}" for k in range(d)]


def write_solution_csv(path: Path, grid: TriangleGrid, u: np.ndarray, v: np.ndarray, upper: bool = False) -> Path:
    """Rows for every triangle node (``s <= t``, or ``t <= s`` with ``upper``)."""
    N = grid.n_time
    ii, jj = np.triu_indices(N) if upper else np.tril_indices(N)
    t, s, ys = grid.ts_mesh()
    full = lambda a: np.broadcast_to(a, grid.shape)[ii, jj].reshape(len(ii), -1)  # noqa: E731
    cols = [full(t), full(s)] + [full(y) for y in ys] + [full(u), full(v)]
    return _write_csv(path, ["t", "s"] + _y_names(grid.d) + ["u", "v"], cols)


# -- modes ---------------------------------------------------------------------


def _holder(cfg: RunConfig) -> HolderConfig:
    return HolderConfig(alpha=cfg.alpha, seed=cfg.seed)


def _exact_errors(bp: BuiltProblem, grid, u, v) -> dict:
    ex = bp.exact(grid)
    if ex is None:
        return {}
    mask = np.broadcast_to(grid.tri_mask(), grid.shape)
    return {
        "max_error": float(np.abs(u - ex[0])[mask].max()),
        "max_error_v": float(np.abs(v - ex[1])[mask].max()),
    }


def _solve(cfg: RunConfig, bp: BuiltProblem, grid, nonlinear: bool) -> tuple[LinearSolution, dict]:
    kw = dict(tol=cfg.tolerance, max_iter=cfg.max_iter, contraction_cap=cfg.contraction_cap,
              theta=cfg.theta, norm_cfg=_holder(cfg))
    if not nonlinear:
        if bp.kind != "linear":
            raise ConfigurationError(f"mode solve-linear needs a linear problem, got {bp.kind}")
        sol = solve_linear(bp.linear, grid, **kw)
        extra = {"equivalence_residual": check_equivalence(sol)}
    else:
        if bp.kind not in ("linear", "nonlinear"):
            raise ConfigurationError(f"mode {cfg.mode} needs a linear or nonlinear problem, got {bp.kind}")
        prob = bp.nonlinear if bp.kind == "nonlinear" else linear_as_nonlinear(bp.linear, grid.d)
        sol = solve_nonlinear(prob, grid, **kw)
        extra = {"residual": residual_nonlinear(sol.u, prob)}
    extra.update(_exact_errors(bp, grid, sol.u.values, sol.v.values))
    return sol, extra


def _forward_problem(bp: BuiltProblem, d):
    return bp.nonlinear if bp.kind == "nonlinear" else linear_as_nonlinear(bp.linear, d)


def _run_solve(cfg, bp, grid, out: Path, nonlinear: bool) -> PipelineResult:
    return _solve_and_write(cfg, bp, grid, out, nonlinear)[0]


def _solve_and_write(cfg, bp, grid, out: Path, nonlinear: bool):
    sol, extra = _solve(cfg, bp, grid, nonlinear)
    report = sol.report.to_dict()
    report.update(extra)
    arts = {
        "solution": write_solution_csv(out / "solution.csv", grid, sol.u.values, sol.v.values),
        "solver_report": write_json(out / "solver_report.json", report),
        "norm_report": write_json(out / "norm_report.json", sol.report.norm_snapshot.to_dict()),
    }
    return PipelineResult(0, arts, report), sol


def _run_hjb(cfg, bp, grid, out: Path) -> PipelineResult:
    if bp.kind != "control":
        raise ConfigurationError(f"mode solve-hjb needs a control problem, got {bp.kind}")
    cp = bp.control
    pol = solve_equilibrium_hjb(cp, grid, cfg.tolerance, cfg.max_iter, cfg.contraction_cap, cfg.theta)
    res1, res2 = verify_hjb_system(pol, cp)
    report = dict(pol.report, hjb_residual_value=res1, hjb_residual_policy=res2, t0=pol.t0)
    fwd = pol.forward
    e = np.asarray(pol.e)
    e_cols = [e] if cp.m == 1 else [e[k] for k in range(cp.m)]
    s_full = np.broadcast_to(pol.s.reshape((-1,) + (1,) * grid.d), pol.v.shape)
    y_full = [np.broadcast_to(y, pol.v.shape) for y in grid.lattice(lead=1)]
    e_names = ["e"] if cp.m == 1 else [f"e{k + 1}" for k in range(cp.m)]
    arts = {
        "policy": _write_csv(out / "policy.csv", ["s"] + _y_names(grid.d) + e_names + ["v"],
                             [s_full] + y_full + e_cols + [pol.v]),
        "solution": write_solution_csv(out / "solution.csv", grid, fwd.u.values, fwd.v.values),
        "solver_report": write_json(out / "solver_report.json", report),
        "norm_report": write_json(out / "norm_report.json", fwd.report.norm_snapshot.to_dict()),
    }
    return PipelineResult(0, arts, report)


def _run_fbsde(cfg, bp, grid, out: Path, dump_paths: bool) -> PipelineResult:
    res, sol = _solve_and_write(cfg, bp, grid, out, nonlinear=bp.kind == "nonlinear")
    prob = _forward_problem(bp, grid.d)
    back = BackwardField.from_forward(sol, grid.T, prob)
    b, sigma, y0 = sde_coefficients(cfg)
    fb = cfg.fbsde
    paths = simulate_forward(b, sigma, y0, grid.T, fb.n_paths, fb.n_steps, seed=cfg.seed, t0=back.t0, d=grid.d)
    stats = bsde_residual_stats(evaluate_fk_fields(back, sigma, paths), chunk=fb.chunk, keep_per_path=dump_paths)
    report = stats.to_dict()
    report["within_3se"] = bool(max(report["max_ratio_y"], report["max_ratio_z"]) <= 3.0)
    report["diagnostics"] = paths.diagnostics
    arts = dict(res.artifacts)
    arts["fbsde_report"] = write_json(out / "fbsde_report.json", report)
    if dump_paths:
        pp = stats.per_path
        n_t, P = pp["R_Y"].shape
        tcol = np.repeat(np.asarray(pp["t"]), P)
        pcol = np.tile(np.arange(P), n_t)
        arts["per_path"] = _write_csv(out / "fbsde_paths.csv", ["t", "path", "R_Y", "R_Z"],
                                      [tcol, pcol, pp["R_Y"], pp["R_Z"]])
    return PipelineResult(0, arts, report)


def _run_manufacture(cfg, out: Path) -> PipelineResult:
    u_star, rhs = manufacture_payload(cfg)
    d = cfg.grid.d
    f = manufacture_source(u_star, rhs, d)
    dev = spot_check_source(u_star, rhs, f, d, n=100, seed=cfg.seed, T=cfg.grid.T, L=cfg.grid.L)
    report = {"u_star": u_star.text, "f": f.text, "f_t": f.diff("t").text,
              "spot_check_nodes": 100, "spot_check_max_deviation": dev}
    arts = {"manufactured": write_json(out / "manufactured.json", report)}
    if dev > SPOT_CHECK_LIMIT:
        raise ConsistencyError(f"manufactured source deviates from finite differences by {dev:.3g}")
    return PipelineResult(0, arts, report)


def _run_norms(cfg, bp, grid, out: Path) -> PipelineResult:
    if bp.kind == "field":
        t, s, ys = grid.ts_mesh()
        names = ("t", "s") + tuple(_y_names(grid.d))
        vals = dict(zip(names, (t, s) + tuple(ys)))
        mask = np.broadcast_to(grid.tri_mask(), grid.shape)
        U = np.where(mask, np.broadcast_to(bp.field(**{k: vals[k] for k in bp.field.free}), grid.shape), 0.0)
        ft = bp.field.diff("t")
        V = np.where(mask, np.broadcast_to(ft(**{k: vals[k] for k in ft.free}), grid.shape), 0.0)
    elif bp.kind in ("linear", "nonlinear"):
        sol, _ = _solve(cfg, bp, grid, bp.kind == "nonlinear")
        U, V = sol.u.values, sol.v.values
    else:
        raise ConfigurationError("mode norms needs a field expression or a linear/nonlinear problem")
    rep = tri_norms_array(U, grid.dt, grid.dy, grid.d, _holder(cfg), order=2, V=V)
    arts = {"norm_report": write_json(out / "norm_report.json", rep.to_dict())}
    return PipelineResult(0, arts, rep.to_dict())


def _run_once(cfg, bp, grid, out: Path, dump_paths: bool) -> PipelineResult:
    mode = cfg.mode
    if mode == "solve-linear":
        return _run_solve(cfg, bp, grid, out, nonlinear=False)
    if mode == "solve-nonlinear":
        return _run_solve(cfg, bp, grid, out, nonlinear=True)
    if mode == "solve-hjb":
        return _run_hjb(cfg, bp, grid, out)
    if mode == "verify-fbsde":
        return _run_fbsde(cfg, bp, grid, out, dump_paths)
    if mode == "norms":
        return _run_norms(cfg, bp, grid, out)
    return _run_manufacture(cfg, out)


def _level_values(cfg, bp, grid):
    """Solution values used by the convergence table (diagonal value for HJB)."""
    if cfg.mode == "solve-hjb":
        pol = solve_equilibrium_hjb(bp.control, grid, cfg.tolerance, cfg.max_iter, cfg.contraction_cap, cfg.theta)
        return pol.v, None, pol.report
    sol, extra = _solve(cfg, bp, grid, cfg.mode != "solve-linear")
    return sol.u.values, extra.get("max_error"), sol.report.to_dict()


def _refinement_table(cfg, bp, levels: int, out: Path) -> dict:
    """Solve on ``levels`` grids, halving (dt, dy) each time; compare against u* or the next level."""
    if cfg.mode not in ("solve-linear", "solve-nonlinear", "solve-hjb"):
        raise ConfigurationError("--refine applies to solve-linear, solve-nonlinear and solve-hjb")
    rows, values = [], []
    for lev in range(levels):
        grid = cfg.grid.build(lev)
        vals, err, rep = _level_values(cfg, bp, grid)
        values.append(vals)
        rows.append({"level": lev, "n_time": grid.n_time, "n_space": grid.n_space, "dt": grid.dt, "dy": grid.dy,
                     "iterations": rep["iterations"], "error": err})
    for lev, row in enumerate(rows):
        if row["error"] is None and lev + 1 < levels:
            coarse, fine = values[lev], values[lev + 1]
            sub = fine[(slice(None, None, 2),) * coarse.ndim]
            if cfg.mode != "solve-hjb":
                mask = np.broadcast_to(cfg.grid.build(lev).tri_mask(), coarse.shape)
                row["error"] = float(np.abs(coarse - sub)[mask].max())
            else:
                row["error"] = float(np.abs(coarse - sub).max())
            row["error_kind"] = "difference to next level"
        elif row["error"] is not None:
            row["error_kind"] = "exact solution"
    for lev in range(1, levels):
        a, b = rows[lev - 1]["error"], rows[lev]["error"]
        rows[lev]["ratio"] = None if (a is None or not b) else a / b
    rows[0]["ratio"] = None
    header = ["level", "n_time", "n_space", "dt", "dy", "iterations", "error", "ratio"]
    cols = [[np.nan if r.get(h) is None else r[h] for r in rows] for h in header]
    _write_csv(out / "convergence.csv", header, [np.asarray(c, dtype=float) for c in cols])
    write_json(out / "convergence.json", rows)
    return {"convergence": rows}


def run_solver_pipeline(cfg: RunConfig, dump_paths: bool = False) -> PipelineResult:
    """Execute the configured mode and write its artifacts under ``cfg.output``.

    Returns exit status 0 on success; errors propagate with their exit code
    (``main`` turns them into ``error.json``).
    """
    validate(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    bp = build_problem(cfg)
    write_json(out / "config.json", cfg.to_dict())
    grid = cfg.grid.build()
    result = _run_once(cfg, bp, grid, out, dump_paths)
    if cfg.refine > 1:
        result.summary.update(_refinement_table(cfg, bp, cfg.refine, out))
        result.artifacts["convergence"] = out / "convergence.csv"
    return result


# -- entry point -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nonlocal-pde", description="Solve nonlocal parabolic problems on the time triangle.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="use a built-in problem instead of a config file")
    p.add_argument("--mode", help="override the configured mode")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="RNG seed for sampled norms and paths")
    p.add_argument("--refine", type=int, help="number of grid levels for a convergence table")
    p.add_argument("--dump-paths", action="store_true", help="write per-path residuals in verify-fbsde")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    return p


def _error_payload(exc: NonlocalPDEError) -> dict:
    out = {"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}
    if isinstance(exc, ConvergenceError) and exc.report is not None:
        rep = exc.report
        out["report"] = rep.to_dict() if hasattr(rep, "to_dict") else rep
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out_dir = None
    try:
        if args.config and args.preset:
            raise ConfigurationError("give either --config or --preset, not both")
        if args.config:
            cfg = load_problem_config(args.config)
        else:
            data = {"problem": {"preset": args.preset or "linear-manufactured"}}
            if args.preset == "hjb-lq":
                data["mode"] = "solve-hjb"
            elif args.preset == "nonlinear-manufactured":
                data["mode"] = "solve-nonlinear"
            cfg = config_from_dict(data)
        overrides = {"mode": args.mode, "output": args.out, "seed": args.seed, "refine": args.refine}
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        validate(cfg)
        out_dir = Path(cfg.output)
        if args.print_config:
            print(serialize_config(cfg))
            return 0
        result = run_solver_pipeline(cfg, dump_paths=args.dump_paths)
    except NonlocalPDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out_dir is not None:
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
                write_json(out_dir / "error.json", _error_payload(exc))
            except OSError:
                pass
        return exc.exit_code
    for name, path in result.artifacts.items():
        print(f"{name}: {path}")
    return result.status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
