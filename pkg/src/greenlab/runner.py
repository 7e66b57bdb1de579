"""Experiment runner: selected experiments to CSV files plus a manifest.

Execution follows dependency order (check first, then solve/green, then
everything downstream).  All floats are written with 17 significant digits
and files end in LF newlines, so a (config, seed) pair reproduces its
outputs byte for byte; wall times live only in the manifest and are
suppressed by timestamps=False.

A global rescale factor r transforms the parabolic pipeline the way the
operator scales: the box, dt and horizon, the coefficients (through the
covariant rescaling), the kernel pole, the fit window, and the cylinder
lists.  Expression-valued data is evaluated as written in the rescaled
coordinates, and the elliptic study (a separate autonomous grid) is left
untouched.
"""

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .bounds import (degiorgi_trace, estimate_N0, fit_gaussian,
                     rescale_coefficients, verify_envelope)
from .config import DEPENDS, EXPERIMENTS, ExperimentConfig, parse_config
from .davies import (WeightFunction, check_envelope, compute_rates,
                     evolve_weighted_energy, window_doubling)
from .elliptic import check_elliptic_bound, default_quadrature, integrate_kernel
from .fields import check_hypotheses
from .green import approximate_green
from .grid import ParabolicCylinder, build_grid
from .solver import solve_cauchy, verify_energy_inequality

try:
    _VERSION = metadata.version("greenlab")
except metadata.PackageNotFoundError:
    _VERSION = "unknown"


class HypothesisFailure(RuntimeError):
    """Structural hypotheses failed under strict mode; exit code 3."""


@dataclass
class RunResult:
    passed: bool
    manifest: dict
    out_dir: Path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_selection(cfg: ExperimentConfig, subcommand: str) -> list[str]:
    """Expand a subcommand to the dependency-closed, ordered experiment list."""
    if subcommand == "all":
        wanted = set(cfg.experiments)
    else:
        wanted = {subcommand}
    closed = set()
    stack = list(wanted)
    while stack:
        name = stack.pop()
        if name in closed:
            continue
        closed.add(name)
        stack.extend(DEPENDS[name])
    return [e for e in EXPERIMENTS if e in closed]


def _rescaled_grid(raw_grid: dict, r: float):
    box = [(r * lo, r * hi) for lo, hi in (tuple(s) for s in raw_grid["box"])]
    return build_grid(n=raw_grid["n"], box=box, cells=raw_grid["cells"],
                      t_start=r * r * raw_grid.get("t_start", 0.0),
                      t_end=r * r * raw_grid["t_end"],
                      dt=r * r * raw_grid["dt"])


def _cylinder(spec: dict, r_scale: float) -> ParabolicCylinder:
    return ParabolicCylinder(r_scale ** 2 * float(spec["t0"]),
                             tuple(r_scale * float(x) for x in spec["x0"]),
                             r_scale * float(spec["r"]), "-")


def run(cfg: ExperimentConfig, selection: list[str], out_dir, *,
        seed: int | None = None, strict: bool = False,
        timestamps: bool = True) -> RunResult:
    """Execute the selection in order; always leaves a manifest behind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else int(seed)
    r = cfg.rescale

    grid, field = cfg.grid, cfg.field
    if r != 1.0:
        grid = _rescaled_grid(cfg.raw["grid"], r)
        field = rescale_coefficients(field, r)

    (out / "config.json").write_text(cfg.canonical(), encoding="utf-8")
    manifest = {
        "config_hash": cfg.digest(),
        "config_file": "config.json",
        "versions": {"greenlab": _VERSION, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "seed": seed,
        "rescale": r,
        "selection": list(selection),
        "experiments": {},
        "outputs": {},
    }

    state = {"selection": set(selection)}
    error = None
    try:
        for name in selection:
            t0 = time.perf_counter()
            record, files = _EXPERIMENTS[name](cfg, grid, field, seed, out,
                                               state)
            if timestamps:
                record["wall_time"] = time.perf_counter() - t0
            record["outputs"] = files
            manifest["experiments"][name] = record
            if name == "check" and strict and not record["passed"]:
                raise HypothesisFailure(
                    "the coefficient field fails the structural hypotheses; "
                    "see hypotheses.csv")
    except BaseException as exc:
        error = exc
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        flags = [rec["passed"] for rec in manifest["experiments"].values()
                 if "passed" in rec]
        manifest["passed"] = bool(all(flags)) and error is None
        for path in sorted(out.glob("*.csv")) + [out / "config.json"]:
            manifest["outputs"][path.name] = _sha256(path)
        (out / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
    return RunResult(passed=manifest["passed"], manifest=manifest,
                     out_dir=out)


# ---------------------------------------------------------------------------
# the individual experiments
# ---------------------------------------------------------------------------

def _axis_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{a}" for a in range(n)]


def _run_check(cfg, grid, field, seed, out, state):
    rep = check_hypotheses(field, grid, seed=seed)
    _write_csv(out / "hypotheses.csv", ["name", "value", "threshold", "pass"],
               rep.rows())
    state["hypotheses"] = rep
    return {"passed": rep.passed, "h1": rep.h1_passed, "h2": rep.h2_passed,
            "h3": rep.h3_passed, "drift_norm": rep.drift_norm}, \
        ["hypotheses.csv"]


def _export_steps(first: int, last: int, count: int) -> np.ndarray:
    return np.unique(np.linspace(first, last, min(count, last - first + 1))
                     .round().astype(int))


def _run_solve(cfg, grid, field, seed, out, state):
    sec = cfg.section("solve")
    sol = solve_cauchy(field, grid, sec["initial"], sec["source"])
    state["solution"] = sol
    times = grid.times()
    coords = grid.interior_coords()
    index = np.stack(np.unravel_index(np.arange(grid.num_interior),
                                      grid.interior_shape)) + 1
    header = (["step", "t"] + _axis_names("i", grid.n)
              + _axis_names("x", grid.n) + ["u"])
    rows = []
    for k in _export_steps(sol.first_step, sol.last_step,
                           sec["num_export_times"]):
        vals = sol.value_at(int(k))
        for j in range(grid.num_interior):
            rows.append([int(k), times[k], *index[:, j].tolist(),
                         *coords[j].tolist(), vals[j]])
    _write_csv(out / "solution.csv", header, rows)
    check = verify_energy_inequality(sol)
    record = {"passed": bool(np.isfinite(check.ratio)),
              "energy_ratio": check.ratio, "energy": check.energy,
              "data_norm": check.data_norm}
    files = ["solution.csv"]
    if "n0" in cfg.raw and "green" not in state["selection"]:
        record["n0"], extra = _run_n0(cfg, sol, out)
        files.extend(extra)
    return record, files


def _run_n0(cfg, sol, out):
    sec = cfg.section("n0")
    r = cfg.rescale
    cyls = [_cylinder(c, r) for c in cfg.raw["n0"]["cylinders"]]
    reports = estimate_N0(sol, cyls, f=sec["source"])
    n = sol.grid.n
    header = ["r", "t0"] + _axis_names("x", n) + ["N0"]
    _write_csv(out / "n0.csv", header,
               [[rep.r, rep.t0, *rep.x0, rep.N0] for rep in reports])
    return {"max": max(rep.N0 for rep in reports),
            "min": min(rep.N0 for rep in reports)}, ["n0.csv"]


def _run_green(cfg, grid, field, seed, out, state):
    sec = cfg.section("green")
    s, y = cfg.raw["green"]["pole"]
    r = cfg.rescale
    pole = (r * r * float(s), [r * float(v) for v in y])
    kernel = approximate_green(field, grid, pole, epsilon=sec["epsilon"],
                               mode=sec["mode"])
    state["green"] = kernel
    times = grid.times()
    coords = grid.interior_coords()
    header = (["t"] + _axis_names("x", grid.n) + ["s"]
              + _axis_names("y", grid.n) + ["value", "epsilon", "mode"])
    sol = kernel.solution
    rows = []
    for k in _export_steps(sol.first_step + 1, sol.last_step,
                           sec["num_export_times"]):
        vals = kernel.value_at(int(k))
        for j in range(grid.num_interior):
            rows.append([times[k], *coords[j].tolist(), kernel.pole_time,
                         *kernel.pole_point.tolist(), vals[j],
                         kernel.epsilon, kernel.mode])
    _write_csv(out / "green.csv", header, rows)
    record = {"pole_time": kernel.pole_time,
              "pole_point": kernel.pole_point.tolist(),
              "epsilon": kernel.epsilon, "mode": kernel.mode,
              "mass_end": kernel.mass_at(sol.last_step)}
    files = ["green.csv"]
    if "n0" in cfg.raw:
        record["n0"], extra = _run_n0(cfg, sol, out)
        files.extend(extra)
    return record, files


def _fit_filters(cfg):
    sec = cfg.section("fit")
    r = cfg.rescale
    filters = {}
    for key in ("t_min", "t_max"):
        if sec[key] is not None:
            filters[key] = r * r * sec[key]
    for key in ("min_dist", "boundary_buffer"):
        if sec[key] is not None:
            filters[key] = r * sec[key]
    filters["xi_cap"] = sec["xi_cap"]
    return filters, sec["margin"]


def _run_fit(cfg, grid, field, seed, out, state):
    kernel = state["green"]
    filters, margin = _fit_filters(cfg)
    fit = fit_gaussian(kernel, **filters)
    rep = verify_envelope(kernel, fit.C, fit.kappa, margin=margin, **filters)
    _write_csv(out / "fit.csv",
               ["C", "kappa", "r_squared", "n_samples", "residual_max"],
               [[fit.C, fit.kappa, fit.r_squared, fit.n_samples,
                 fit.residual_max]])
    return {"passed": rep.passed, "C": fit.C, "kappa": fit.kappa,
            "r_squared": fit.r_squared, "n_samples": fit.n_samples,
            "margin": margin, "num_violations": rep.num_violations}, \
        ["fit.csv"]


def _run_davies(cfg, grid, field, seed, out, state):
    sec = cfg.section("davies")
    raw_g = cfg.raw["davies"]["gamma1"]
    gammas = [float(g) for g in (raw_g if isinstance(raw_g, list)
                                 else [raw_g])]
    direction = sec["direction"] or [1.0] + [0.0] * (grid.n - 1)
    cap = math.inf if sec["cap"] is None else float(sec["cap"])
    data = sec.get("data")
    rates = compute_rates(field.nu, field.theta, regime=sec["regime"],
                          cn=cfg.cn)
    delta = rates.delta_window(1.0) if rates.regime == "p>n" else math.nan
    _write_csv(out / "rates.csv",
               ["regime", "nu", "theta", "cn", "lambda", "mu",
                "delta_window"],
               [[rates.regime, rates.nu, rates.theta, rates.cn, rates.lam,
                 rates.mu, delta]])
    files = ["rates.csv"]
    record = {"passed": True, "regime": rates.regime, "lambda": rates.lam,
              "mu": rates.mu, "gammas": []}
    for i, g in enumerate(gammas):
        weight = WeightFunction(g, direction, kind=sec["kind"], cap=cap)
        rep = evolve_weighted_energy(field, grid, weight, data,
                                     backward=sec["backward"])
        rep = check_envelope(rep, rates, slack=sec["slack"])
        entry = {"gamma1": g, "worst_ratio": rep.worst_ratio,
                 "envelope_ok": rep.envelope_ok}
        if rates.regime == "p>n":
            windows = window_doubling(rep, rates, slack=sec["slack"])
            entry["windows_passed"] = windows.passed
            entry["num_windows"] = len(windows.ratios)
        name = "davies.csv" if i == 0 else f"davies_g{i}.csv"
        _write_csv(out / name, ["t", "I", "envelope_value", "ratio"],
                   rep.rows())
        files.append(name)
        record["gammas"].append(entry)
        ok = rep.envelope_ok and entry.get("windows_passed", True)
        record["passed"] = record["passed"] and bool(ok)
    return record, files


def _run_degiorgi(cfg, grid, field, seed, out, state):
    sec = cfg.section("degiorgi")
    source = sec["source"]
    if source is None:
        source = cfg.section("solve")["source"]
    cyl = _cylinder(cfg.raw["degiorgi"]["cylinder"], cfg.rescale)
    trace = degiorgi_trace(state["solution"], cyl, k=sec["k"], M=sec["M"],
                           f=source, delta=sec["delta"])
    rows = [[m + 1, trace.radii[m], trace.levels[m], trace.Y[m]]
            for m in range(len(trace.Y))]
    _write_csv(out / "degiorgi.csv", ["m", "r_m", "k_m", "Y_m"], rows)
    return {"passed": trace.converged, "k": trace.k, "r": trace.r,
            "Y_first": trace.Y[0], "Y_last": trace.Y[-1]}, ["degiorgi.csv"]


def _run_elliptic(cfg, grid, field, seed, out, state):
    sec = cfg.section("elliptic")
    e_grid = cfg.elliptic_grid if cfg.elliptic_grid is not None else grid
    e_field = (cfg.elliptic_field if cfg.elliptic_field is not None
               else field)
    quad = default_quadrature(e_grid,
                              nodes_per_decade=sec["nodes_per_decade"],
                              tail_fraction=sec["tail_fraction"],
                              decades=sec["decades"])
    green = integrate_kernel(e_field, e_grid, sec["pole"], quad)
    bound = check_elliptic_bound(green, rho_min=sec["rho_min"],
                                 rho_max=sec["rho_max"])
    order = np.argsort(green.rho, kind="stable")
    stride = max(1, int(math.ceil(len(order) / sec["max_rows"])))
    order = order[::stride]
    header = (_axis_names("x", 3) + _axis_names("y", 3)
              + ["G_value", "tail_bound", "rho"])
    rows = [[*green.coords[j].tolist(), *green.pole.tolist(),
             green.value[j], green.tail[j], green.rho[j]]
            for j in order]
    _write_csv(out / "elliptic.csv", header, rows)
    return {"passed": True, "constant": bound.constant,
            "rho_at_max": bound.rho_at_max, "t_cut": green.t_cut,
            "decay_rate": green.decay_rate,
            "num_samples": len(green)}, ["elliptic.csv"]


_EXPERIMENTS = {
    "check": _run_check,
    "solve": _run_solve,
    "green": _run_green,
    "fit": _run_fit,
    "davies": _run_davies,
    "degiorgi": _run_degiorgi,
    "elliptic": _run_elliptic,
}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _headline(manifest: dict) -> dict:
    exps = manifest["experiments"]
    gammas = exps.get("davies", {}).get("gammas", [])
    worst = max((g["worst_ratio"] for g in gammas), default=math.nan)
    n0 = math.nan
    for name in ("green", "solve"):
        if "n0" in exps.get(name, {}):
            n0 = exps[name]["n0"]["max"]
            break
    return {"kappa": exps.get("fit", {}).get("kappa", math.nan),
            "C": exps.get("fit", {}).get("C", math.nan),
            "N0": n0,
            "worst_ratio": worst,
            "elliptic_constant": exps.get("elliptic", {}).get("constant",
                                                              math.nan)}


def _sweep_worker(payload):
    index, raw, axis, value, out_dir, seed, strict, timestamps = payload
    sub = parse_config(raw).with_value(axis, value)
    selection = resolve_selection(sub, "all")
    result = run(sub, selection, out_dir, seed=seed, strict=strict,
                 timestamps=timestamps)
    return index, result.passed, _headline(result.manifest)


def run_sweep(cfg: ExperimentConfig, out_dir, *, seed: int | None = None,
              workers: int | None = None, strict: bool = False,
              timestamps: bool = True) -> RunResult:
    """One run per sweep value, concurrently, plus an aggregated sweep.csv."""
    if "sweep" not in cfg.raw:
        raise ValueError("the config has no sweep section")
    axis = cfg.raw["sweep"]["axis"]
    values = cfg.raw["sweep"]["values"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = cfg.workers if workers is None else int(workers)
    payloads = [(i, cfg.raw, axis, v, str(out / f"sweep_{i:03d}"), seed,
                 strict, timestamps) for i, v in enumerate(values)]
    if workers > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=min(workers,
                                                 len(values))) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]
    results.sort(key=lambda r: r[0])

    header = ["index", "value", "kappa", "C", "N0", "worst_ratio",
              "elliptic_constant"]
    rows = []
    for index, _, metrics in results:
        value = values[index]
        cell = value if isinstance(value, (int, float)) \
            else json.dumps(value)
        rows.append([index, cell, metrics["kappa"], metrics["C"],
                     metrics["N0"], metrics["worst_ratio"],
                     metrics["elliptic_constant"]])
    _write_csv(out / "sweep.csv", header, rows)
    (out / "config.json").write_text(cfg.canonical(), encoding="utf-8")

    passed = all(ok for _, ok, _ in results)
    manifest = {
        "config_hash": cfg.digest(),
        "config_file": "config.json",
        "versions": {"greenlab": _VERSION, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "sweep": {"axis": axis, "values": values},
        "runs": [f"sweep_{i:03d}" for i in range(len(values))],
        "outputs": {"sweep.csv": _sha256(out / "sweep.csv"),
                    "config.json": _sha256(out / "config.json")},
        "passed": passed,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    return RunResult(passed=passed, manifest=manifest, out_dir=out)
