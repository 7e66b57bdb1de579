"""Experiment configuration: strict schema, defaults, canonical form.

A config is a single JSON document.  Validation is strict: unknown keys are
rejected at every level this module owns, required keys are checked for the
experiments actually selected, and the coefficient expressions are built
once up front so vocabulary errors surface before any solve starts.  The
canonical serialization (sorted keys, two-space indent, trailing newline)
is a fixed point of parse/serialize, which is what makes run manifests and
config hashes reproducible.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field

from .fields import CoefficientField, build_coefficients, build_scalar
from .grid import SpaceTimeGrid, build_grid

EXPERIMENTS = ("check", "solve", "green", "fit", "davies", "degiorgi",
               "elliptic")

# run prerequisites: an experiment pulls in everything it reads from
DEPENDS = {
    "check": (),
    "solve": ("check",),
    "green": ("check",),
    "fit": ("check", "green"),
    "davies": ("check",),
    "degiorgi": ("check", "solve"),
    "elliptic": ("check",),
}


class ConfigError(ValueError):
    """Schema violation; the CLI maps this to exit code 2."""


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check_keys(obj, path, known, required=()):
    _require(isinstance(obj, dict), path, "expected a mapping")
    unknown = sorted(set(obj) - set(known))
    _require(not unknown, path, f"unknown keys {unknown}; "
             f"allowed keys are {sorted(known)}")
    missing = sorted(set(required) - set(obj))
    _require(not missing, path, f"missing required keys {missing}")


def _number(obj, key, path, *, default=None, lo=None, hi=None,
            required=False, integer=False):
    if key not in obj:
        _require(not required, path, f"missing required key '{key}'")
        return default
    v = obj[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    _require(ok and math.isfinite(v), f"{path}.{key}",
             "expected a finite number")
    if integer:
        _require(float(v).is_integer(), f"{path}.{key}",
                 "expected an integer")
        v = int(v)
    if lo is not None:
        _require(v >= lo, f"{path}.{key}", f"must be >= {lo}")
    if hi is not None:
        _require(v <= hi, f"{path}.{key}", f"must be <= {hi}")
    return v


def _expression(obj, key, path, *, required=False):
    if key not in obj or obj[key] is None:
        _require(not required, path, f"missing required key '{key}'")
        return None
    _require(isinstance(obj[key], dict), f"{path}.{key}",
             "expected an expression mapping with a 'kind'")
    return obj[key]


def _point(obj, key, path, n, *, required=False):
    if key not in obj:
        _require(not required, path, f"missing required key '{key}'")
        return None
    v = obj[key]
    ok = isinstance(v, list) and len(v) == n and all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
    _require(ok, f"{path}.{key}", f"expected a list of {n} numbers")
    return [float(x) for x in v]


def _validate_grid(raw, path):
    _check_keys(raw, path, ("n", "box", "cells", "t_start", "t_end", "dt"),
                required=("n", "box", "cells", "t_end", "dt"))
    n = _number(raw, "n", path, lo=1, hi=3, integer=True, required=True)
    box = raw["box"]
    ok = isinstance(box, list) and len(box) == n and all(
        isinstance(side, list) and len(side) == 2 for side in box)
    _require(ok, f"{path}.box", f"expected {n} [lo, hi] pairs")
    for side in box:
        _require(side[0] < side[1], f"{path}.box", "each side needs lo < hi")
    cells = raw["cells"]
    if isinstance(cells, list):
        _require(len(cells) == n and all(isinstance(c, int) and c >= 4
                                         for c in cells),
                 f"{path}.cells", f"expected {n} integer counts >= 4")
    else:
        _require(isinstance(cells, int) and cells >= 4, f"{path}.cells",
                 "expected an integer count >= 4")
    t0 = _number(raw, "t_start", path, default=0.0)
    t1 = _number(raw, "t_end", path, required=True)
    _require(t1 > t0, f"{path}.t_end", "must exceed t_start")
    dt = _number(raw, "dt", path, required=True)
    _require(dt > 0 and t1 - t0 >= 2 * dt, f"{path}.dt",
             "must be positive with at least two steps in the horizon")
    return n


def _validate_coefficients(raw, path, n):
    _check_keys(raw, path,
                ("a", "b", "c", "d", "nu", "theta", "p", "q", "cn"))
    cn = _number(raw, "cn", path, default=1.0)
    _require(cn > 0, f"{path}.cn", "must be positive")
    body = {k: v for k, v in raw.items() if k != "cn"}
    try:
        field = build_coefficients(body, n=n)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return field, cn


def _validate_cylinder(raw, path, n):
    _check_keys(raw, path, ("t0", "x0", "r"), required=("t0", "x0", "r"))
    _number(raw, "t0", path, required=True)
    _point(raw, "x0", path, n, required=True)
    r = _number(raw, "r", path, required=True)
    _require(r > 0, f"{path}.r", "must be positive")


@dataclass
class ExperimentConfig:
    """Validated configuration plus the objects it resolves to.

    raw keeps exactly the keys the document supplied (defaults are applied
    by accessors, never written back), so canonical() round-trips.
    """

    raw: dict
    grid: SpaceTimeGrid
    field: CoefficientField
    cn: float
    elliptic_grid: SpaceTimeGrid | None = None
    elliptic_field: CoefficientField | None = None
    _sections: dict = dc_field(default_factory=dict)

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def experiments(self) -> list[str]:
        return list(self.raw.get("experiments", []))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def workers(self) -> int:
        return int(self.raw.get("workers", 1))

    @property
    def output(self) -> str:
        return self.raw.get("output", "out")

    @property
    def rescale(self) -> float:
        return float(self.raw.get("rescale", 1.0))

    def section(self, name: str) -> dict:
        """Experiment settings with defaults merged in."""
        merged = dict(_SECTION_DEFAULTS.get(name, {}))
        merged.update(self.raw.get(name, {}))
        return merged

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        """A new validated config with one field replaced."""
        raw = json.loads(json.dumps(self.raw))
        node = raw
        parts = dotted.split(".")
        for key in parts[:-1]:
            _require(isinstance(node, dict) and key in node, "sweep.axis",
                     f"path {dotted!r} does not exist in the config")
            node = node[key]
        _require(isinstance(node, dict) and parts[-1] in node, "sweep.axis",
                 f"path {dotted!r} does not exist in the config")
        node[parts[-1]] = value
        raw.pop("sweep", None)
        return parse_config(raw)


_SECTION_DEFAULTS = {
    "solve": {"source": None, "num_export_times": 9},
    "green": {"epsilon": None, "mode": "point", "num_export_times": 24},
    "fit": {"t_min": None, "t_max": None, "min_dist": None,
            "boundary_buffer": None, "xi_cap": 30.0, "margin": 0.1},
    "davies": {"direction": None, "kind": "linear", "cap": None,
               "regime": "p>n", "backward": False, "slack": 0.1},
    "degiorgi": {"M": 5, "delta": 0.1, "k": None, "source": None},
    "n0": {"source": None},
    "elliptic": {"grid": None, "coefficients": None, "nodes_per_decade": 40,
                 "tail_fraction": 1e-3, "decades": 4.0, "rho_min": None,
                 "rho_max": None, "max_rows": 100000},
}

_TOP_KEYS = ("grid", "coefficients", "experiments", "seed", "workers",
             "output", "rescale", "solve", "green", "fit", "davies",
             "degiorgi", "n0", "elliptic", "sweep")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed JSON document against the strict schema."""
    _check_keys(raw, "config", _TOP_KEYS, required=("grid", "coefficients",
                                                    "experiments"))
    n = _validate_grid(raw["grid"], "grid")
    try:
        grid = _build_grid_section(raw["grid"])
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    field, cn = _validate_coefficients(raw["coefficients"], "coefficients", n)

    exps = raw["experiments"]
    _require(isinstance(exps, list), "experiments", "expected a list")
    for e in exps:
        _require(e in EXPERIMENTS, "experiments",
                 f"unknown experiment {e!r}; known: {list(EXPERIMENTS)}")
    _require(len(set(exps)) == len(exps), "experiments",
             "experiments are listed more than once")

    _number(raw, "seed", "config", default=0, lo=0, integer=True)
    _number(raw, "workers", "config", default=1, lo=1, hi=64, integer=True)
    _number(raw, "rescale", "config", default=1.0)
    _require(raw.get("rescale", 1.0) > 0, "rescale", "must be positive")
    if "output" in raw:
        _require(isinstance(raw["output"], str) and raw["output"],
                 "output", "expected a non-empty string")

    selected = set(exps)
    cfg = ExperimentConfig(raw=raw, grid=grid, field=field, cn=cn)

    if "solve" in raw or "solve" in selected or "degiorgi" in selected:
        sec = raw.get("solve", {})
        _check_keys(sec, "solve", ("initial", "source", "num_export_times"),
                    required=("initial",) if ("solve" in selected
                                              or "degiorgi" in selected)
                    else ())
        _expression(sec, "initial", "solve")
        _expression(sec, "source", "solve")
        _number(sec, "num_export_times", "solve", default=9, lo=2,
                integer=True)
        _build_expressions(sec, ("initial", "source"), "solve", n)

    if "green" in raw or not selected.isdisjoint({"green", "fit"}):
        sec = raw.get("green", {})
        need = ("pole",) if not selected.isdisjoint({"green", "fit"}) else ()
        _check_keys(sec, "green",
                    ("pole", "epsilon", "mode", "num_export_times"),
                    required=need)
        if "pole" in sec:
            pole = sec["pole"]
            ok = (isinstance(pole, list) and len(pole) == 2
                  and isinstance(pole[0], (int, float))
                  and isinstance(pole[1], list) and len(pole[1]) == n)
            _require(ok, "green.pole", "expected [s, [y...]] with "
                     f"{n} coordinates")
        if sec.get("epsilon") is not None:
            eps = _number(sec, "epsilon", "green")
            _require(eps > 0, "green.epsilon", "must be positive")
        _require(sec.get("mode", "point") in ("point", "cylinder"),
                 "green.mode", "expected 'point' or 'cylinder'")
        _number(sec, "num_export_times", "green", default=24, lo=1,
                integer=True)

    if "fit" in raw:
        sec = raw["fit"]
        _check_keys(sec, "fit", tuple(_SECTION_DEFAULTS["fit"]))
        for key in ("t_min", "t_max", "min_dist", "boundary_buffer"):
            if sec.get(key) is not None:
                _require(_number(sec, key, "fit") > 0, f"fit.{key}",
                         "must be positive")
        _number(sec, "xi_cap", "fit", default=30.0, lo=1.0)
        _number(sec, "margin", "fit", default=0.1, lo=0.0)

    if "davies" in raw or "davies" in selected:
        sec = raw.get("davies", {})
        need = ("gamma1", "data") if "davies" in selected else ()
        _check_keys(sec, "davies",
                    ("gamma1", "data", "direction", "kind", "cap", "regime",
                     "backward", "slack"), required=need)
        if "gamma1" in sec:
            g = sec["gamma1"]
            gs = g if isinstance(g, list) else [g]
            ok = gs and all(isinstance(x, (int, float))
                            and not isinstance(x, bool) and x > 0 for x in gs)
            _require(ok, "davies.gamma1",
                     "expected a positive number or list of them")
        _expression(sec, "data", "davies")
        _build_expressions(sec, ("data",), "davies", n)
        if sec.get("direction") is not None:
            _point(sec, "direction", "davies", n)
        kind = sec.get("kind", "linear")
        _require(kind in ("linear", "capped"), "davies.kind",
                 "expected 'linear' or 'capped'")
        if kind == "capped":
            _require(_number(sec, "cap", "davies", required=True) > 0,
                     "davies.cap", "must be positive")
        _require(sec.get("regime", "p>n") in ("p>n", "p=n"), "davies.regime",
                 "expected 'p>n' or 'p=n'")
        _require(isinstance(sec.get("backward", False), bool),
                 "davies.backward", "expected a boolean")
        _number(sec, "slack", "davies", default=0.1, lo=0.0)

    if "degiorgi" in raw or "degiorgi" in selected:
        sec = raw.get("degiorgi", {})
        need = ("cylinder",) if "degiorgi" in selected else ()
        _check_keys(sec, "degiorgi", ("cylinder", "M", "delta", "k",
                                      "source"), required=need)
        if "cylinder" in sec:
            _validate_cylinder(sec["cylinder"], "degiorgi.cylinder", n)
        _number(sec, "M", "degiorgi", default=5, lo=2, hi=12, integer=True)
        d = _number(sec, "delta", "degiorgi", default=0.1)
        _require(0 < d < 1, "degiorgi.delta", "must lie in (0, 1)")
        if sec.get("k") is not None:
            _require(_number(sec, "k", "degiorgi") > 0, "degiorgi.k",
                     "must be positive")
        _expression(sec, "source", "degiorgi")
        _build_expressions(sec, ("source",), "degiorgi", n)

    if "n0" in raw:
        sec = raw["n0"]
        _check_keys(sec, "n0", ("cylinders", "source"),
                    required=("cylinders",))
        cyls = sec["cylinders"]
        _require(isinstance(cyls, list) and cyls, "n0.cylinders",
                 "expected a non-empty list")
        for i, cyl in enumerate(cyls):
            _validate_cylinder(cyl, f"n0.cylinders[{i}]", n)
        _expression(sec, "source", "n0")
        _build_expressions(sec, ("source",), "n0", n)

    if "elliptic" in raw or "elliptic" in selected:
        sec = raw.get("elliptic", {})
        need = ("pole",) if "elliptic" in selected else ()
        _check_keys(sec, "elliptic", tuple(_SECTION_DEFAULTS["elliptic"])
                    + ("pole",), required=need)
        e_grid, e_field = cfg.grid, cfg.field
        if sec.get("grid") is not None:
            en = _validate_grid(sec["grid"], "elliptic.grid")
            _require(en == 3, "elliptic.grid", "the time-integrated kernel "
                     "needs a three-dimensional grid")
            try:
                e_grid = _build_grid_section(sec["grid"])
            except ValueError as exc:
                raise ConfigError(f"elliptic.grid: {exc}") from exc
        if sec.get("coefficients") is not None:
            e_field, _ = _validate_coefficients(
                sec["coefficients"], "elliptic.coefficients", e_grid.n)
        if "elliptic" in selected:
            _require(e_grid.n == 3, "elliptic", "the time-integrated kernel "
                     "needs a three-dimensional grid")
            _require(e_field.n == e_grid.n, "elliptic.coefficients",
                     "dimension does not match the elliptic grid")
        if "pole" in sec:
            _point(sec, "pole", "elliptic", e_grid.n, required=True)
        _number(sec, "nodes_per_decade", "elliptic", default=40, lo=4,
                integer=True)
        tf = _number(sec, "tail_fraction", "elliptic", default=1e-3)
        _require(0 < tf < 1, "elliptic.tail_fraction", "must lie in (0, 1)")
        _require(_number(sec, "decades", "elliptic", default=4.0) > 0,
                 "elliptic.decades", "must be positive")
        for key in ("rho_min", "rho_max"):
            if sec.get(key) is not None:
                _require(_number(sec, key, "elliptic") > 0,
                         f"elliptic.{key}", "must be positive")
        _number(sec, "max_rows", "elliptic", default=100000, lo=100,
                integer=True)
        cfg.elliptic_grid, cfg.elliptic_field = e_grid, e_field

    if "sweep" in raw:
        sec = raw["sweep"]
        _check_keys(sec, "sweep", ("axis", "values"),
                    required=("axis", "values"))
        _require(isinstance(sec["axis"], str) and sec["axis"], "sweep.axis",
                 "expected a dotted key path")
        _require(isinstance(sec["values"], list) and sec["values"],
                 "sweep.values", "expected a non-empty list")
        cfg.with_value(sec["axis"], sec["values"][0])

    return cfg


def _build_grid_section(raw: dict) -> SpaceTimeGrid:
    return build_grid(n=raw["n"], box=[tuple(side) for side in raw["box"]],
                      cells=raw["cells"], t_start=raw.get("t_start", 0.0),
                      t_end=raw["t_end"], dt=raw["dt"])


def _build_expressions(sec, keys, path, n):
    for key in keys:
        if sec.get(key) is not None:
            try:
                build_scalar(sec[key], n)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}.{key}: {exc}") from exc


_REQUIRED_FOR = {
    "solve": ("solve", ("initial",)),
    "green": ("green", ("pole",)),
    "davies": ("davies", ("gamma1", "data")),
    "degiorgi": ("degiorgi", ("cylinder",)),
    "elliptic": ("elliptic", ("pole",)),
}


def ensure_selectable(cfg: ExperimentConfig, selection) -> None:
    """Check the keys a subcommand needs even when the config's own
    experiment list never selected it."""
    for name in selection:
        req = _REQUIRED_FOR.get(name)
        if req is None:
            continue
        sec_name, keys = req
        sec = cfg.raw.get(sec_name, {})
        missing = sorted(set(keys) - set(sec))
        _require(not missing, sec_name,
                 f"missing required keys {missing} for experiment {name!r}")
    if "elliptic" in selection:
        e_grid = cfg.elliptic_grid if cfg.elliptic_grid is not None \
            else cfg.grid
        _require(e_grid.n == 3, "elliptic", "the time-integrated kernel "
                 "needs a three-dimensional grid")


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _require(isinstance(raw, dict), "config", "expected a JSON object")
    return parse_config(raw)
