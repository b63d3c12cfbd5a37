import csv
import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonlocal_pde import ConfigurationError, load_problem_config
from nonlocal_pde.cli import main, run_solver_pipeline
from nonlocal_pde.config import PRESETS, RunConfig, config_from_dict, serialize_config

SMALL = {"n_time": 9, "n_space": 16}


def write_cfg(tmp_path, data, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def test_defaults_filled_in(tmp_path):
    cfg = load_problem_config(write_cfg(tmp_path, {}))
    assert cfg.mode == "solve-linear" and cfg.tolerance == 1e-8 and cfg.max_iter == 200
    assert cfg.grid.n_time == 64 and cfg.grid.n_space == 128
    assert cfg.problem == {"preset": "linear-manufactured"}


@pytest.mark.parametrize(
    "data,match",
    [
        ({"tolerance": -1}, "tolerance must be positive"),
        ({"mode": "fly"}, "unknown mode"),
        ({"colour": 1}, "unknown key 'colour'"),
        ({"grid": {"n_time": 1}}, "invalid grid"),
        ({"grid": {"zz": 1}}, "unknown key"),
        ({"problem": {"preset": "nope"}}, "preset"),
        ({"problem": {"linear": {"a": "1 +"}}}, "column"),
        ({"max_iter": "many"}, "integer"),
    ],
)
def test_invalid_configurations(tmp_path, data, match):
    with pytest.raises(ConfigurationError, match=match):
        load_problem_config(write_cfg(tmp_path, data))


def test_json_syntax_error_has_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "mode": "solve-linear",\n  "seed": ,\n}')
    with pytest.raises(ConfigurationError, match=r"bad\.json:3:11"):
        load_problem_config(p)


@settings(max_examples=25, deadline=None)
@given(
    n_time=st.integers(2, 40),
    n_space=st.integers(4, 64),
    tol=st.floats(1e-12, 1e-2),
    seed=st.integers(0, 2**31),
    preset=st.sampled_from(sorted(k for k in PRESETS if k != "nonelliptic")),
)
def test_config_round_trip(n_time, n_space, tol, seed, preset):
    cfg = config_from_dict(
        {"grid": {"n_time": n_time, "n_space": n_space}, "tolerance": tol, "seed": seed, "problem": {"preset": preset}}
    )
    again = config_from_dict(json.loads(serialize_config(cfg)))
    assert again == cfg
    assert isinstance(again, RunConfig)


def run(tmp_path, *argv, out="out"):
    return main([*argv, "--out", str(tmp_path / out)])


def test_solve_linear_writes_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, {"grid": SMALL})
    assert run(tmp_path, "--config", str(cfg)) == 0
    out = tmp_path / "out"
    for name in ("solution.csv", "solver_report.json", "norm_report.json", "config.json"):
        assert (out / name).exists()
    with open(out / "solution.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "s", "y", "u", "v"]
    assert len(rows) == 1 + 9 * 10 // 2 * 16
    rep = json.loads((out / "solver_report.json").read_text())
    assert rep["converged"] and rep["max_error"] < (1 / 8) ** 2 + (2 * np.pi / 16) ** 2


def test_nonelliptic_preset_exits_with_model_error(tmp_path):
    assert run(tmp_path, "--preset", "nonelliptic") == 3
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert err["error"] == "ModelError" and err["exit_code"] == 3
    assert "ellipticity" in err["message"]


def test_configuration_error_exit_code(tmp_path):
    assert run(tmp_path, "--config", str(write_cfg(tmp_path, {"tolerance": 0}))) == 2
    assert run(tmp_path, "--config", str(tmp_path / "missing.json")) == 2


def test_convergence_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, {"grid": SMALL, "max_iter": 1, "problem": {"preset": "nonlinear-manufactured"},
                               "mode": "solve-nonlinear", "tolerance": 1e-14})
    assert run(tmp_path, "--config", str(cfg)) == 4
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert "report" in err


def test_print_config(tmp_path, capsys):
    assert run(tmp_path, "--preset", "hjb-lq", "--print-config") == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["mode"] == "solve-hjb"
    assert not (tmp_path / "out").exists()


def test_refinement_table(tmp_path):
    cfg = write_cfg(tmp_path, {"grid": {"n_time": 5, "n_space": 8}})
    assert run(tmp_path, "--config", str(cfg), "--refine", "3") == 0
    rows = json.loads((tmp_path / "out" / "convergence.json").read_text())
    assert [r["n_time"] for r in rows] == [5, 9, 17]
    assert [r["n_space"] for r in rows] == [8, 16, 32]
    assert rows[0]["ratio"] is None and rows[2]["ratio"] > 3.0


def test_manufacture_mode(tmp_path):
    assert run(tmp_path, "--preset", "linear-heat", "--mode", "manufacture") == 0
    rep = json.loads((tmp_path / "out" / "manufactured.json").read_text())
    assert rep["spot_check_max_deviation"] <= 1e-6
    assert float(rep["f"]) == 0.0


def test_norms_mode_for_field(tmp_path):
    cfg = write_cfg(tmp_path, {"mode": "norms", "grid": {"n_time": 3, "n_space": 4, "L": 1.0},
                               "problem": {"field": "t*s"}})
    assert run(tmp_path, "--config", str(cfg)) == 0
    rep = json.loads((tmp_path / "out" / "norm_report.json").read_text())
    # u = t s, v = s on three nodes
    assert rep["bracket"] == 2.0 and rep["double_bracket"] == 4.0


def test_hjb_mode(tmp_path):
    cfg = write_cfg(tmp_path, {"grid": SMALL, "problem": {"preset": "hjb-lq"}, "mode": "solve-hjb"})
    assert run(tmp_path, "--config", str(cfg)) == 0
    with open(tmp_path / "out" / "policy.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["s", "y", "e", "v"]


def test_runs_are_deterministic(tmp_path):
    data = {"grid": SMALL, "mode": "verify-fbsde", "seed": 5, "fbsde": {"n_paths": 200, "n_steps": 16}}
    for out in ("a", "b"):
        data["output"] = str(tmp_path / out)
        assert run_solver_pipeline(config_from_dict(data)).status == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "config.json")
    assert "fbsde_report.json" in names
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def test_solution_csv_reproduces_values(tmp_path):
    cfg = write_cfg(tmp_path, {"grid": SMALL})
    run(tmp_path, "--config", str(cfg))
    data = np.genfromtxt(tmp_path / "out" / "solution.csv", delimiter=",", names=True)
    exact = np.exp(data["t"] - data["s"]) * (2 + np.sin(data["y"]))
    assert np.abs(data["u"] - exact).max() < (1 / 8) ** 2 + (2 * np.pi / 16) ** 2
