import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from vilab.cli import HEADER, main


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _run(tmp_path, cfg, out="out", seed=None):
    p = _write(tmp_path, cfg)
    argv = [cfg["command"], "--config", str(p), "--out", str(tmp_path / out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    code = main(argv)
    return code, tmp_path / out


def _rows(out):
    with open(out / "trace.csv") as fh:
        r = list(csv.reader(fh))
    assert r[0] == HEADER
    return np.array([[float(v) for v in row] for row in r[1:]])


def _summary(out):
    return json.loads((out / "summary.json").read_text())


FLOW = {"schema_version": 1, "command": "flow", "grid": {"kind": "Interval", "n": 256},
        "energy": {"kind": "Obstacle"}, "boundary": {"const": 0.125},
        "initial": {"bump": 0.2}, "dt": 0.01, "t_end": 1.0, "record_timing": False}


def test_stationary(tmp_path):
    cfg = {"schema_version": 1, "command": "stationary", "grid": {"kind": "Interval", "n": 512},
           "energy": {"kind": "Obstacle"}, "boundary": {"const": 0.5}}
    code, out = _run(tmp_path, cfg)
    assert code == 0
    s = _summary(out)
    assert s["status"] == "ok" and s["result"]["oracle_sup_error"] <= 1e-4
    assert s["wall_ms"] is not None and s["schema"] == 1
    assert _rows(out).shape == (1, 6)


def test_flow_energy_column_monotone(tmp_path):
    code, out = _run(tmp_path, FLOW)
    assert code == 0
    rows = _rows(out)
    assert rows.shape[0] == 101
    # nonincreasing up to round-off once the flow has settled
    assert np.all(np.diff(rows[:, 1]) <= 1e-12 * np.abs(rows[:-1, 1]))
    s = _summary(out)
    assert s["result"]["energy_monotone"] and s["wall_ms"] is None
    assert s["rate_fit"]["model"] in ("Exponential", "Power", "Logarithmic")


def test_flow_csv_round_trip(tmp_path):
    code, out = _run(tmp_path, FLOW)
    rows = _rows(out)
    s = _summary(out)
    fit_t = (rows[:, 0] >= s["rate_fit"]["window"][0]) & (rows[:, 0] <= s["rate_fit"]["window"][1])
    from vilab.analysis import fit_decay
    refit = fit_decay(rows[fit_t, 0], rows[fit_t, 2])
    assert abs(refit.residual - s["rate_fit"]["residual"]) <= 1e-12


def test_loja_deterministic_and_round_trip(tmp_path):
    cfg = {"schema_version": 1, "command": "loja", "grid": {"kind": "Interval", "n": 65},
           "energy": {"kind": "Obstacle"}, "boundary": {"const": 0.125}, "n_samples": 30,
           "seed": 4, "record_timing": False}
    code_a, a = _run(tmp_path, cfg, "a")
    code_b, b = _run(tmp_path, cfg, "b")
    assert code_a == code_b == 0
    for f in ("trace.csv", "summary.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    rows = _rows(a)
    rep = _summary(a)["loja_report"]
    ok = rows[:, 5] > 0
    assert abs(np.max(rows[ok, 4] / rows[ok, 5]) - rep["C_fit"]) <= 1e-12
    assert rep["violations"] == 0 and rep["n_samples"] == 30


def test_seed_flag_overrides_config(tmp_path):
    cfg = {"schema_version": 1, "command": "loja", "grid": {"kind": "Interval", "n": 33},
           "energy": {"kind": "Obstacle"}, "boundary": {"const": 0.125}, "n_samples": 9,
           "seed": 1, "record_timing": False}
    _, a = _run(tmp_path, cfg, "a", seed=2)
    _, b = _run(tmp_path, cfg, "b")
    assert _summary(a)["config"]["seed"] == 2
    assert (a / "trace.csv").read_bytes() != (b / "trace.csv").read_bytes()


def test_epi_thin(tmp_path):
    cfg = {"schema_version": 1, "command": "epi", "problem": "TH", "n_samples": 5,
           "n_radii": 33}
    code, out = _run(tmp_path, cfg)
    assert code == 0
    rep = _summary(out)["epi_report"]
    assert rep["worst_epsilon"] > 0 and rep["pass"]
    assert abs(np.nanmin(_rows(out)[:, 3]) - rep["worst_epsilon"]) <= 1e-12


def test_ode(tmp_path):
    cfg = {"schema_version": 1, "command": "ode", "dt": 1e-3, "t_end": 2.0,
           "ode": {"problem": "FreeQuadratic", "x0": [1.0, 0.0]}}
    code, out = _run(tmp_path, cfg)
    assert code == 0
    s = _summary(out)
    assert s["rate_fit"]["model"] == "Exponential"
    assert abs(s["rate_fit"]["params"]["rate"] - 2) < 0.01


@pytest.mark.parametrize("cfg", [
    {"schema_version": 1, "command": "flow"},
    dict(FLOW, unknown_key=1),
    dict(FLOW, schema_version=2),
    dict(FLOW, grid={"kind": "Interval", "n": 256, "extra": 0}),
    dict(FLOW, energy={"kind": "SphereThin"}),
])
def test_invalid_config_exit_1(tmp_path, cfg):
    code, out = _run(tmp_path, cfg)
    assert code == 1


def test_unparseable_config_exit_1(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["flow", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_command_mismatch_exit_1(tmp_path):
    p = _write(tmp_path, FLOW)
    assert main(["loja", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_numerical_failure_exit_2(tmp_path):
    code, out = _run(tmp_path, dict(FLOW, tol=1e-300))
    assert code == 2
    s = _summary(out)
    assert s["status"] == "numerical_failure" and "error" in s
    assert (out / "trace.csv").read_text().splitlines()[0] == ",".join(HEADER)


def test_module_entry_point(tmp_path):
    p = _write(tmp_path, {"schema_version": 1, "command": "ode", "dt": 1e-2, "t_end": 1.0,
                          "ode": {"problem": "FreeQuadratic", "x0": [1.0, 0.0]}})
    r = subprocess.run([sys.executable, "-m", "vilab.cli", "ode", "--config", str(p),
                        "--out", str(tmp_path / "o")], capture_output=True)
    assert r.returncode == 0
    assert (tmp_path / "o" / "summary.json").exists()
