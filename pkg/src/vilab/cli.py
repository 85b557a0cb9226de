"""Experiment runner: ``vilab <command> --config <path> [--out <dir>] [--seed <u64>]``.

Every run writes ``trace.csv`` (fixed header) and ``summary.json``.  Exit
codes: 0 success, 1 invalid config, 2 numerical failure (partial record
flushed).
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, epiperimetric
from .constraint import cone_set, obstacle_set, project, thin_set
from .energy import (EnergyKind, Obstacle, SphereObstacle, SphereThin, ThinObstacle,
                     check_compatible, eval_energy)
from .flow import OdeProblem, run_flow, run_ode_flow, verify_flow_identities
from .geometry import GridKind, build_grid
from .qp import SolverError
from .stationary import (critical_level, nearest_critical, solve_obstacle,
                         solve_thin_obstacle)

log = logging.getLogger("vilab")

SCHEMA_VERSION = 1
COMMANDS = ("stationary", "flow", "loja", "epi", "ode")
HEADER = ["t", "energy", "l2_dist", "h1_dist", "step_norm", "k_norm"]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_mode = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "command"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0},
        "record_timing": {"type": "boolean"},
        "grid": {
            "type": "object", "additionalProperties": False, "required": ["kind", "n"],
            "properties": {
                "kind": {"enum": [k.value for k in GridKind if k != GridKind.POINTS]},
                "n": {"type": "integer", "minimum": 8},
                "n_theta": {"type": "integer", "minimum": 2},
            },
        },
        "energy": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {
                "kind": {"enum": [k.value for k in EnergyKind if k != EnergyKind.FINITE_DIM]},
                "lam": _pos,
                "m": {"type": "integer", "minimum": 1},
            },
        },
        "boundary": {
            "type": "object", "additionalProperties": False,
            "properties": {"const": _num, "modes": {"type": "array", "items": _mode}},
        },
        "initial": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "base": {"enum": ["stationary", "zero"]},
                "const": _num,
                "modes": {"type": "array", "items": _mode},
                "bump": _num,
            },
        },
        "dt": _pos,
        "t_end": _pos,
        "tol": _pos,
        "fit_window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "n_samples": {"type": "integer", "minimum": 1},
        "delta": _pos,
        "problem": {"enum": ["OB", "TH"]},
        "m": {"type": "integer", "minimum": 1},
        "n_circle": {"type": "integer", "minimum": 8},
        "n_radii": {"type": "integer", "minimum": 3},
        "eps_fl": _pos,
        "ode": {
            "type": "object", "additionalProperties": False, "required": ["problem", "x0"],
            "properties": {
                "problem": {"enum": [p.value for p in OdeProblem]},
                "x0": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "max_rel_step": _pos,
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"command": {"enum": ["stationary", "flow", "loja"]}}},
         "then": {"required": ["grid", "energy"]}},
        {"if": {"properties": {"command": {"const": "epi"}}}, "then": {"required": ["problem"]}},
        {"if": {"properties": {"command": {"const": "ode"}}},
         "then": {"required": ["ode", "dt", "t_end"]}},
    ],
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}") from e
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from e
    return cfg


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else "%.17g" % x


def _jsonable(x):
    if isinstance(x, dict):
        return {str(getattr(k, "value", k)): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if hasattr(x, "value"):
        return x.value
    return x


class Record:
    """Streams CSV rows and writes the summary; single writer per run."""

    def __init__(self, out: Path, cfg: dict):
        out.mkdir(parents=True, exist_ok=True)
        self.out = out
        self.cfg = cfg
        self._fh = open(out / "trace.csv", "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(HEADER)
        self.summary = {"config": cfg, "rate_fit": None, "loja_report": None,
                        "epi_report": None, "result": None, "status": "running",
                        "wall_ms": None, "schema": SCHEMA_VERSION}

    def row(self, *vals):
        self._w.writerow([_fmt(v) for v in vals])

    def close(self, status, wall_ms):
        self._fh.close()
        self.summary["status"] = status
        if self.cfg.get("record_timing", True):
            self.summary["wall_ms"] = wall_ms
        text = json.dumps(_jsonable(self.summary), indent=2, sort_keys=True)
        (self.out / "summary.json").write_text(text + "\n")


# --- problem assembly -------------------------------------------------------------

def _modes_field(grid, modes):
    """Sum of a cos(k t) + b sin(k t) type modes adapted to the grid."""
    f = np.zeros(grid.n_nodes)
    x = grid.coords
    for k, a, b in modes or []:
        k = int(k)
        if grid.kind == GridKind.INTERVAL:
            f += a * np.sin(k * np.pi * (x[:, 0] + 1) / 2)
        elif grid.kind == GridKind.CIRCLE:
            f += a * np.cos(k * grid.angles) + b * np.sin(k * grid.angles)
        else:
            r = np.hypot(x[:, 0], x[:, 1])
            th = np.arctan2(x[:, 1], x[:, 0])
            f += (1 - r * r) * r ** k * (a * np.cos(k * th) + b * np.sin(k * th))
    return f


def _boundary(grid, cfg):
    b = cfg.get("boundary", {})
    const = b.get("const", 0.0)
    modes = b.get("modes", [])
    if not grid.is_polar:
        if modes:
            raise ConfigError("boundary modes need a polar grid")
        return const
    th = np.arctan2(grid.coords[:, 1], grid.coords[:, 0])
    g = np.full(grid.n_nodes, float(const))
    for k, a, bb in modes:
        g += a * np.cos(k * th) + bb * np.sin(k * th)
    return g


def _spec(cfg):
    e = cfg["energy"]
    kind = EnergyKind(e["kind"])
    if kind == EnergyKind.OBSTACLE:
        return Obstacle()
    if kind == EnergyKind.THIN_OBSTACLE:
        return ThinObstacle()
    if kind == EnergyKind.SPHERE_OBSTACLE:
        if "lam" not in e:
            raise ConfigError("energy/lam is required for SphereObstacle")
        return SphereObstacle(e["lam"])
    return SphereThin(e.get("m", 1))


def _setup(cfg):
    grid = build_grid(cfg["grid"]["kind"], cfg["grid"]["n"], cfg["grid"].get("n_theta"))
    spec = _spec(cfg)
    try:
        check_compatible(spec, grid)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    tol = cfg.get("tol", 1e-8)
    phi = None
    if spec.kind == EnergyKind.OBSTACLE:
        g = _boundary(grid, cfg)
        K = obstacle_set(grid, g)
        phi = solve_obstacle(grid, g, tol=tol)
    elif spec.kind == EnergyKind.THIN_OBSTACLE:
        g = _boundary(grid, cfg)
        K = thin_set(grid, g)
        phi = solve_thin_obstacle(grid, g, tol=tol)
    elif spec.kind == EnergyKind.SPHERE_OBSTACLE:
        K = cone_set(grid)
    else:
        K = thin_set(grid)
    return grid, spec, K, phi


def _initial(cfg, grid, K, phi, rng):
    ini = cfg.get("initial", {})
    base = ini.get("base", "stationary" if phi is not None else "zero")
    if base == "stationary" and phi is None:
        raise ConfigError("initial/base 'stationary' needs a ball energy")
    u = phi.solution.copy() if base == "stationary" else np.zeros(grid.n_nodes)
    u += ini.get("const", 0.0) + _modes_field(grid, ini.get("modes"))
    if ini.get("bump", 0.0):
        u += ini["bump"] * analysis._bump(grid, rng)
    return project(K, u)


def _target_dists(spec, grid, phi, states):
    from .analysis import h1_distance

    l2, h1 = [], []
    for u in states:
        tgt = phi.solution if phi is not None else nearest_critical(spec, grid, u)
        e = u - tgt
        l2.append(float(np.sqrt(np.sum(grid.weights * e * e))))
        h1.append(h1_distance(grid, u, tgt))
    return np.array(l2), np.array(h1)


def _rate_fit(times, dists, window, gamma=None):
    try:
        f = analysis.fit_decay(times, dists, window, gamma)
    except ValueError as e:
        return {"error": str(e)}
    return {"model": f.model.value, "params": f.params, "residual": f.residual,
            "window": f.window, "residuals": f.residuals, "all_params": f.all_params,
            "r2_exponential": f.r2_exponential, "predicted_exponent": f.predicted_exponent}


# --- commands ------------------------------------------------------------------

def cmd_stationary(cfg, rec, rng):
    grid, spec, K, phi = _setup(cfg)
    if phi is None:
        raise ConfigError("stationary needs Obstacle or ThinObstacle")
    res = {"energy": phi.energy, "kkt_residual": phi.kkt_residual,
           "iterations": phi.iterations, "n_active": int(phi.active_set.sum()),
           "method": phi.method}
    g = cfg.get("boundary", {}).get("const", 0.0)
    err = np.nan
    if grid.kind == GridKind.INTERVAL and spec.kind == EnergyKind.OBSTACLE and g >= 0:
        x0 = max(1.0 - np.sqrt(2 * g), 0.0)
        x = np.abs(grid.coords[:, 0])
        err = float(np.max(np.abs(phi.solution - np.maximum(x - x0, 0) ** 2 / 2)))
        res["oracle_sup_error"] = err
    rec.row(0.0, phi.energy, err, np.nan, np.nan, phi.kkt_residual)
    rec.summary["result"] = res


def cmd_flow(cfg, rec, rng):
    grid, spec, K, phi = _setup(cfg)
    u0 = _initial(cfg, grid, K, phi, rng)
    dt = cfg.get("dt")
    t_end = cfg.get("t_end", 1.0)
    partial = []

    def on_step(k, t, u):
        partial.append((t, u))

    try:
        tr = run_flow(spec, K, u0, dt, t_end, tol=cfg.get("tol", 1e-8), on_step=on_step)
    except SolverError:
        # flush what was computed before the failure
        for t, u in partial:
            l2, h1 = _target_dists(spec, grid, phi, [u])
            rec.row(t, eval_energy(spec, grid, u), l2[0], h1[0], np.nan, np.nan)
        raise
    l2, h1 = _target_dists(spec, grid, phi, tr.states)
    for i in range(len(tr)):
        rec.row(tr.times[i], tr.energies[i], l2[i], h1[i], tr.step_norms[i], tr.k_norms[i])
    window = cfg.get("fit_window", (0.1 * t_end, t_end))
    rec.summary["rate_fit"] = _rate_fit(tr.times, l2, window, cfg.get("gamma"))
    idf = verify_flow_identities(tr)
    rec.summary["result"] = {
        "n_steps": len(tr) - 1, "dt": tr.dt,
        "energy_monotone": bool(np.all(np.diff(tr.energies) <= 1e-10 * (1 + np.abs(tr.energies[:-1])))),
        "identity_max_rel_err_i": idf.max_rel_err_i,
        "identity_max_rel_err_iii": idf.max_rel_err_iii,
    }


def cmd_loja(cfg, rec, rng):
    grid, spec, K, phi = _setup(cfg)
    n = cfg.get("n_samples", 300)
    seed = cfg.get("seed", 0)
    if spec.kind == EnergyKind.OBSTACLE:
        gamma, form = cfg.get("gamma", 0.5), "ball"
        target = phi.solution
        samples = analysis.stratified_battery(spec, K, target, n, seed, cfg.get("dt"))
        level = None
    elif spec.kind == EnergyKind.THIN_OBSTACLE:
        gamma, form = cfg.get("gamma", 0.5), "ball"
        target = phi.solution
        samples = [u for u in analysis.thin_source_battery(K, n, seed)
                   if analysis.sottile_conditions(K, u)]
        level = None
    else:
        delta = cfg.get("delta", 0.05)
        if spec.kind == EnergyKind.SPHERE_OBSTACLE:
            gamma = cfg.get("gamma", analysis.exponent_sphere_obstacle(1))
            centers = [np.full(grid.n_nodes, 1.0 / spec.lam)]
        else:
            gamma = cfg.get("gamma", analysis.exponent_sphere_thin(2))
            centers = [np.cos(2 * spec.m * grid.angles)]
        form = "sphere"
        samples = analysis.circle_battery(spec, K, centers, n, delta, seed)
        target = None
        level = critical_level(spec, grid)
    rep = analysis.loja_check(spec, K, target if target is not None else centers[0], gamma,
                              samples, form, level)
    for i, u in enumerate(samples):
        tgt = target if target is not None else nearest_critical(spec, grid, u)
        e = u - tgt
        rec.row(i, eval_energy(spec, grid, u), np.sqrt(np.sum(grid.weights * e * e)),
                analysis.h1_distance(grid, u, tgt), rep.lhs[i], rep.k_norms[i])
    rec.summary["loja_report"] = {
        "gamma": rep.gamma, "C_fit": rep.C_fit, "violations": rep.violations,
        "n_samples": rep.n_samples, "form": rep.form, "energy_cap": rep.energy_cap,
        "C_fit_power": rep.C_fit_power, "passed": rep.passed,
    }


def cmd_epi(cfg, rec, rng):
    problem = cfg["problem"]
    m = cfg.get("m", 1)
    n = cfg.get("n_samples", 50)
    seed = cfg.get("seed", 0)
    delta = cfg.get("delta", 0.05)
    circle = build_grid(GridKind.CIRCLE, cfg.get("n_circle", 64))
    if problem == "OB":
        traces = epiperimetric.ob_battery(circle, n, delta, seed)
    else:
        traces = epiperimetric.th_battery(circle, n, m, seed)
    rep = epiperimetric.check_log_epi(problem, traces, circle, m, cfg.get("eps_fl", 1.0),
                                      cfg.get("dt", 1e-3), cfg.get("n_radii", 65), delta)
    for i in range(rep.n_elements):
        rec.row(rep.alphas[i], rep.g_h[i], rep.g_z[i], rep.epsilons[i], np.nan, i)
    rec.summary["epi_report"] = {
        "problem": rep.problem, "gamma_used": rep.gamma_used,
        "worst_epsilon": rep.worst_epsilon, "n_elements": rep.n_elements,
        "n_skipped": rep.n_skipped, "never_worse": rep.never_worse,
        "trace_exact": rep.trace_exact, "pass": rep.passed,
    }


def cmd_ode(cfg, rec, rng):
    o = cfg["ode"]
    tr = run_ode_flow(o["problem"], o["x0"], cfg["dt"], cfg["t_end"], o.get("max_rel_step"))
    d = np.hypot(tr.states[:, 0], tr.states[:, 1])
    for i in range(len(tr)):
        rec.row(tr.times[i], tr.energies[i], d[i], np.nan, tr.step_norms[i], tr.k_norms[i])
    window = cfg.get("fit_window", (0.1 * cfg["t_end"], cfg["t_end"]))
    rec.summary["rate_fit"] = _rate_fit(tr.times, d, window, cfg.get("gamma"))
    rec.summary["result"] = {"n_steps": len(tr) - 1, "final_state": tr.states[-1]}


_DISPATCH = {"stationary": cmd_stationary, "flow": cmd_flow, "loja": cmd_loja,
             "epi": cmd_epi, "ode": cmd_ode}


def run(command: str, config_path, out_dir, seed=None) -> int:
    try:
        cfg = load_config(config_path)
        if cfg["command"] != command:
            raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
    except ConfigError as e:
        log.error("invalid config: %s", e)
        return 1
    if seed is not None:
        cfg["seed"] = seed
    rng = np.random.default_rng(cfg.get("seed", 0))
    rec = Record(Path(out_dir), cfg)
    t0 = time.perf_counter()
    status, code = "ok", 0
    try:
        _DISPATCH[command](cfg, rec, rng)
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as e:
        log.error("numerical failure: %s", e)
        status, code = "numerical_failure", 2
        rec.summary["error"] = str(e)
    except ValueError as e:
        # config values the numerics reject (grid/energy mismatch, dt too large, ...)
        log.error("invalid config: %s", e)
        status, code = "config_error", 1
        rec.summary["error"] = str(e)
    except RuntimeError as e:
        log.error("numerical failure: %s", e)
        status, code = "numerical_failure", 2
        rec.summary["error"] = str(e)
    rec.close(status, (time.perf_counter() - t0) * 1e3)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vilab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        log.error("seed must be an unsigned 64-bit integer")
        return 1
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
