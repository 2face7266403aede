"""Run configuration: a TOML file with a versioned schema.

Example::

    schema_version = 1
    seed = 7

    [domain]
    kind = "interval"
    extents = [[0.0, 1.0]]
    bc = ["dirichlet"]
    resolution = 128

    [field]
    spec = "chafee_infante { lambda = 15 }"

    [solver]
    dt = 1e-3

    [experiment]
    name = "spectrum"
    guess = "0"
"""

from __future__ import annotations

import copy
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy as sp

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .grid import BC_KINDS, DomainSpec, Grid, build_grid
from .imex import SCHEMES
from .nonlinearity import CATALOG, NonlinearField, field_from_spec

SCHEMA_VERSION = 1

EXPERIMENTS = ("simulate", "equilibria", "orbit", "spectrum", "connect", "transversality", "nodal",
               "observe", "perturb", "derivative-check")

SOLVER_DEFAULTS = {
    "dt": 1e-3,
    "scheme": "cn",
    "stride": 1,
    "tolerance": 1e-8,
    "blowup_threshold": 1e6,
    "newton_tol": 1e-10,
    "orbit_tol": 1e-6,
    "orbit_steps": 1000,
}

THRESHOLD_DEFAULTS = {
    "unit_margin": 1e-4,
    "transversality_margin": 1e-6,
    "tube": 1e-2,
    "eta_v": 1e-6,
    "eta_g": 1e-6,
    "eta_derivative": 1e-6,
    "eta_match": 1e-6,
    "inflation": 1.5,
}

_SPEC_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(\{.*\})?\s*$", re.S)


def parse_field_spec(text: str) -> tuple[str, dict]:
    """``"name { key = value, ... }"`` to ``(name, params)``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse field spec {text!r}")
    name, body = m.group(1), m.group(2)
    params: dict = {}
    if body:
        inner = body.strip()[1:-1].strip()
        if inner:
            # accept newline or comma separated pairs
            inner = ", ".join(s.strip() for s in re.split(r"[\n,]", inner) if s.strip())
            try:
                params = tomllib.loads("p = {" + inner + "}")["p"]
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"bad parameters in field spec {text!r}: {e}") from None
    return name, params


@dataclass
class RunConfig:
    domain: dict
    field: dict
    solver: dict
    thresholds: dict
    experiment: dict
    output: dict = field(default_factory=dict)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    source: str | None = None

    @property
    def name(self) -> str:
        return self.experiment["name"]

    def resolved(self) -> dict:
        """Plain dictionary of everything a run used; embedded in every report."""
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "domain": copy.deepcopy(self.domain),
            "field": copy.deepcopy(self.field),
            "solver": copy.deepcopy(self.solver),
            "thresholds": copy.deepcopy(self.thresholds),
            "experiment": copy.deepcopy(self.experiment),
            "output": copy.deepcopy(self.output),
        }

    def domain_spec(self) -> DomainSpec:
        d = self.domain
        kind = d["kind"]
        ext = d["extents"]
        if kind == "interval":
            return DomainSpec.interval(ext[0][0], ext[0][1], d["bc"][0])
        if kind == "circle":
            return DomainSpec.circle(ext[0][1] - ext[0][0])
        return DomainSpec("rectangle", tuple(tuple(e) for e in ext), tuple(d["bc"]))

    def grid(self) -> Grid:
        return build_grid(self.domain_spec(), self.domain["resolution"])

    def nonlinearity(self) -> NonlinearField:
        dim = 2 if self.domain["kind"] == "rectangle" else 1
        return field_from_spec(self.field["name"], self.field.get("params", {}), dim)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _positive(section: dict, key: str, where: str):
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v) or v <= 0:
        raise ConfigError(f"{where}.{key} must be a positive number (got {v!r})")


def _normalize_domain(d: dict) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("missing [domain] table")
    kind = d.get("kind", "interval")
    if kind not in ("interval", "circle", "rectangle"):
        raise ConfigError(f"domain.kind must be interval, circle or rectangle (got {kind!r})")
    ext = d.get("extents")
    if ext is None:
        if kind == "circle":
            ext = [[0.0, float(d.get("length", 2 * np.pi))]]
        else:
            raise ConfigError("domain.extents is required")
    ext = [[float(a), float(b)] for a, b in ext]
    dim = 2 if kind == "rectangle" else 1
    if len(ext) != dim:
        raise ConfigError(f"domain.extents needs {dim} pair(s)")
    for a, b in ext:
        if not b > a:
            raise ConfigError("domain extents must satisfy lo < hi")
    bc = d.get("bc", ["periodic"] if kind == "circle" else ["dirichlet"] * dim)
    if isinstance(bc, str):
        bc = [bc] * dim
    bc = list(bc)
    if len(bc) != dim or any(b not in BC_KINDS for b in bc):
        raise ConfigError(f"domain.bc must list {dim} of {BC_KINDS}")
    res = d.get("resolution", 64)
    res_list = res if isinstance(res, list) else [res]
    if any(isinstance(r, bool) or not isinstance(r, int) or r < 4 for r in res_list):
        raise ConfigError("domain.resolution must be an integer (or list) >= 4")
    return {"kind": kind, "extents": ext, "bc": bc, "resolution": res}


def _normalize_field(fsec) -> dict:
    if isinstance(fsec, str):
        name, params = parse_field_spec(fsec)
    elif isinstance(fsec, dict):
        if "spec" in fsec:
            name, params = parse_field_spec(fsec["spec"])
        else:
            name, params = fsec.get("name"), dict(fsec.get("params", {}))
    else:
        raise ConfigError("missing [field] table")
    if name not in CATALOG:
        raise ConfigError(f"unknown field {name!r}; choose from {sorted(CATALOG)}")
    return {"name": name, "params": params}


def from_dict(raw: dict, *, experiment: str | None = None, seed: int | None = None,
              resolution: int | None = None, dt: float | None = None, out: str | None = None,
              source: str | None = None) -> RunConfig:
    """Validate a raw mapping and apply command-line overrides."""
    raw = copy.deepcopy(raw)
    ver = raw.get("schema_version", SCHEMA_VERSION)
    if ver != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {ver!r} (this build reads {SCHEMA_VERSION})")
    known = {"schema_version", "seed", "domain", "field", "solver", "thresholds", "experiment", "output"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    domain = _normalize_domain(raw.get("domain"))
    if resolution is not None:
        domain["resolution"] = int(resolution) if domain["kind"] != "rectangle" else [int(resolution)] * 2
        _normalize_domain(domain)
    fld = _normalize_field(raw.get("field"))
    solver = dict(SOLVER_DEFAULTS)
    solver.update(raw.get("solver", {}))
    if dt is not None:
        solver["dt"] = dt
    unknown = set(solver) - set(SOLVER_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
    for k in ("dt", "tolerance", "blowup_threshold", "newton_tol", "orbit_tol"):
        _positive(solver, k, "solver")
    if solver["scheme"] not in SCHEMES:
        raise ConfigError(f"solver.scheme must be one of {sorted(SCHEMES)}")
    for k in ("stride", "orbit_steps"):
        if isinstance(solver[k], bool) or not isinstance(solver[k], int) or solver[k] < 1:
            raise ConfigError(f"solver.{k} must be a positive integer")
    th = dict(THRESHOLD_DEFAULTS)
    th.update(raw.get("thresholds", {}))
    unknown = set(th) - set(THRESHOLD_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown threshold keys: {sorted(unknown)}")
    for k in th:
        _positive(th, k, "thresholds")
    exp = dict(raw.get("experiment", {}))
    name = exp.get("name", experiment)
    if experiment is not None and name != experiment:
        raise ConfigError(f"config names experiment {name!r} but {experiment!r} was requested")
    if name not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS} (got {name!r})")
    exp["name"] = name
    s = raw.get("seed", 0) if seed is None else seed
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    output = dict(raw.get("output", {}))
    if out is not None:
        output["dir"] = str(out)
    output.setdefault("dir", "parabolax-out")
    return RunConfig(domain, fld, solver, th, exp, output, s, SCHEMA_VERSION, source)


def load_config(path: str | Path, **overrides) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(raw, source=str(p), **overrides)


_EXPR_SYMBOLS = {"x": sp.Symbol("x"), "y": sp.Symbol("y"), "pi": sp.pi, "e": sp.E}


def initial_state(grid: Grid, expr: str | float | int) -> np.ndarray:
    """Grid function from an expression in x (and y)."""
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        return np.full(grid.size, float(expr))
    try:
        e = sp.sympify(str(expr), locals=dict(_EXPR_SYMBOLS))
    except (sp.SympifyError, SyntaxError, TypeError) as err:
        raise ConfigError(f"cannot parse expression {expr!r}: {err}") from None
    allowed = {_EXPR_SYMBOLS["x"], _EXPR_SYMBOLS["y"]} if grid.dim == 2 else {_EXPR_SYMBOLS["x"]}
    if not e.free_symbols <= allowed:
        raise ConfigError(f"expression {expr!r} uses unknown symbols {sorted(map(str, e.free_symbols - allowed))}")
    if e.has(sp.zoo, sp.oo, -sp.oo, sp.nan):
        raise ConfigError(f"expression {expr!r} is not finite on the grid")
    syms = [_EXPR_SYMBOLS["x"], _EXPR_SYMBOLS["y"]][: grid.dim]
    fn = sp.lambdify(syms, e, "numpy")
    vals = np.asarray(fn(*grid.nodes.T), dtype=float) * np.ones(grid.size)
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"expression {expr!r} is not finite on the grid")
    return vals
