"""Experiment pipelines driven by a :class:`RunConfig`.

Each pipeline returns a :class:`PipelineResult`; nothing here touches the
file system.  Every random choice draws from ``cfg.rng()``.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

from .config import RunConfig, initial_state
from .critical import (Equilibrium, PeriodicOrbit, equilibrium_spectrum, find_equilibrium, find_periodic_orbit,
                       period_map_spectrum)
from .errors import ConfigError
from .grid import Grid, build_grid
from .imex import ShiftedSolver
from .manifolds import distance_to, shoot_connection, transversality_report
from .nodal import (SampledFamily, injectivity_scan, period_observability, singular_nodal_scan, tns_estimate,
                    tns_refinement)
from .nonlinearity import NonlinearField
from .perturbation import (SpaceTimeBox, build_bump, colinear_avoiding_perturbation, evaluation_triples,
                           pairing_integral, run_pairing_experiment)
from .reports import PipelineResult, Table
from .semiflow import integrate
from .tangent import linearize_along, propagate


def _p(cfg: RunConfig, key: str, default=None):
    return cfg.experiment.get(key, default)


def _grid_columns(grid: Grid) -> dict:
    names = ["x", "y"][: grid.dim]
    return {n: grid.nodes[:, i] for i, n in enumerate(names)}


def _states_table(times: np.ndarray, states: np.ndarray) -> Table:
    header = ["t"] + [f"u[{j}]" for j in range(states.shape[1])]
    return Table(header, np.column_stack([times, states]).tolist())


def _nodes_table(grid: Grid) -> Table:
    return Table.from_columns(_grid_columns(grid))


def random_smooth(grid: Grid, rng: np.random.Generator, smoothing: float = 1e-2) -> np.ndarray:
    """Random direction smoothed by (I - s Lap)^{-2}, unit weighted norm."""
    v = rng.standard_normal(grid.size)
    S = ShiftedSolver(grid.lap.matrix, smoothing)
    v = S.solve(S.solve(v))
    return v / grid.norm(v)


_T = sp.Symbol("t")


def space_time_function(expr: str, dim: int):
    """Callable (nodes, t) from an expression in x (, y) and t."""
    syms = {"x": sp.Symbol("x"), "y": sp.Symbol("y"), "t": _T, "pi": sp.pi}
    try:
        e = sp.sympify(str(expr), locals=syms)
    except (sp.SympifyError, SyntaxError, TypeError) as err:
        raise ConfigError(f"cannot parse expression {expr!r}: {err}") from None
    allowed = {syms["x"], _T} | ({syms["y"]} if dim == 2 else set())
    if not e.free_symbols <= allowed:
        raise ConfigError(f"expression {expr!r} uses unknown symbols")
    if e.has(sp.zoo, sp.oo, -sp.oo, sp.nan):
        raise ConfigError(f"expression {expr!r} is not finite")
    fn = sp.lambdify([syms["x"], syms["y"], _T], e, "numpy")

    def call(X, t, tau=0.0):
        y = X[:, 1] if X.shape[1] > 1 else np.zeros(len(X))
        return np.asarray(fn(X[:, 0], y, t), dtype=float) * np.ones(len(X))

    return call


# --- building blocks -------------------------------------------------------

def _equilibrium(cfg, f, grid, guess) -> Equilibrium:
    eq = find_equilibrium(f, grid, initial_state(grid, guess), tol=cfg.solver["newton_tol"])
    equilibrium_spectrum(f, eq, margin=cfg.thresholds["unit_margin"])
    return eq


def _orbit(cfg, f, grid, guess, period) -> PeriodicOrbit:
    if period is None:
        raise ConfigError("a periodic element needs 'period' (initial period guess)")
    orb = find_periodic_orbit(f, grid, initial_state(grid, guess), float(period),
                              n_steps=cfg.solver["orbit_steps"], tol=cfg.solver["orbit_tol"])
    period_map_spectrum(f, orb, margin=cfg.thresholds["unit_margin"])
    return orb


def _element(cfg, f, grid, spec):
    if isinstance(spec, (str, int, float)):
        spec = {"guess": spec}
    if not isinstance(spec, dict) or "guess" not in spec:
        raise ConfigError("critical element spec needs a 'guess'")
    if spec.get("kind", "equilibrium") == "periodic" or "period" in spec:
        return _orbit(cfg, f, grid, spec["guess"], spec.get("period"))
    return _equilibrium(cfg, f, grid, spec["guess"])


def _element_json(el) -> dict:
    if isinstance(el, PeriodicOrbit):
        return {"kind": "periodic", "period": el.period, "closure_defect": el.closure_defect,
                "degenerate": el.degenerate, "index": el.index, "spectrum": el.spectrum.to_json()}
    return {"kind": "equilibrium", "residual": el.residual, "iterations": el.iterations,
            "max_abs": float(np.max(np.abs(el.state))), "index": el.index, "spectrum": el.spectrum.to_json()}


def _spectrum_table(spec) -> Table:
    m = np.asarray(spec.all_multipliers)
    rows = [[i, float(z.real), float(z.imag), float(abs(z))] for i, z in enumerate(m)]
    if spec.all_eigenvalues is None:
        return Table(["index", "re", "im", "abs"], rows)
    lam = np.asarray(spec.all_eigenvalues)
    rows = [r + [float(z.real), float(z.imag)] for r, z in zip(rows, lam)]
    return Table(["index", "re", "im", "abs", "eig_re", "eig_im"], rows)


# --- pipelines -------------------------------------------------------------

def simulate(cfg: RunConfig, f: NonlinearField, grid: Grid) -> PipelineResult:
    u0 = initial_state(grid, _p(cfg, "u0", 0.0))
    T = float(_p(cfg, "T", 1.0))
    s = cfg.solver
    tr = integrate(f, grid, u0, T, min(s["dt"], T), scheme=s["scheme"], stride=s["stride"],
                   blowup_threshold=s["blowup_threshold"], solver_tol=s["tolerance"])
    norms = grid.norm(tr.states.T)
    rep = {"T": T, "n_steps": tr.step_meta["n_steps"], "n_stored": int(tr.times.size),
           "final_norm": float(norms[-1]), "final_max": float(np.max(np.abs(tr.final))),
           "max_step_residual": tr.step_meta["max_step_residual"], "scheme": tr.scheme, "blowup": False}
    return PipelineResult("simulate", rep, {"trajectory": _states_table(tr.times, tr.states), "nodes": _nodes_table(grid)},
                          {"norms": Table.from_columns({"t": tr.times, "norm": norms,
                                                        "max_abs": np.max(np.abs(tr.states), axis=1)})})


def equilibria(cfg, f, grid) -> PipelineResult:
    guesses = _p(cfg, "guesses", [_p(cfg, "guess", 0.0)])
    found, cols, spec_rows = [], dict(_grid_columns(grid)), []
    for i, gss in enumerate(guesses):
        eq = _equilibrium(cfg, f, grid, gss)
        found.append(dict(_element_json(eq), guess=str(gss)))
        cols[f"e{i}"] = eq.state
        for k, z in enumerate(eq.spectrum.all_eigenvalues):
            spec_rows.append([i, k, float(z.real), float(z.imag)])
    return PipelineResult("equilibria", {"equilibria": found},
                          {"equilibria": Table.from_columns(cols)},
                          {"spectra": Table(["equilibrium", "k", "re", "im"], spec_rows)})


def orbit(cfg, f, grid) -> PipelineResult:
    orb = _orbit(cfg, f, grid, _p(cfg, "guess", 0.0), _p(cfg, "period"))
    return PipelineResult("orbit", {"orbit": _element_json(orb)},
                          {"orbit": _states_table(orb.samples.times, orb.samples.states)},
                          {"multipliers": _spectrum_table(orb.spectrum)})


def spectrum(cfg, f, grid) -> PipelineResult:
    el = _element(cfg, f, grid, {k: v for k, v in cfg.experiment.items() if k in ("guess", "period", "kind")}
                  or {"guess": 0.0})
    out = _element_json(el)
    out["morse_index"] = el.index
    return PipelineResult("spectrum", out, {"spectrum": _spectrum_table(el.spectrum)})


def _connection(cfg, f, grid):
    src = _element(cfg, f, grid, _p(cfg, "source", 0.0))
    tgt = _element(cfg, f, grid, _p(cfg, "target", 0.0))
    conn = shoot_connection(f, src, tgt, radius=float(_p(cfg, "radius", 1e-2)),
                            horizon=float(_p(cfg, "horizon", 5.0)), dt=cfg.solver["dt"],
                            scheme=cfg.solver["scheme"], tube=cfg.thresholds["tube"],
                            n_angles=int(_p(cfg, "n_angles", 16)))
    return src, tgt, conn


def _connection_tables(conn):
    tr = conn.trajectory
    d, _ = distance_to(conn.target, tr.states)
    return ({"connection": _states_table(tr.times, tr.states)},
            {"distance": Table.from_columns({"t": tr.times, "distance_to_target": d})})


def connect(cfg, f, grid) -> PipelineResult:
    src, tgt, conn = _connection(cfg, f, grid)
    data, plot = _connection_tables(conn)
    rep = {"source": _element_json(src), "target": _element_json(tgt), "connection": conn.to_json()}
    return PipelineResult("connect", rep, data, plot)


def transversality(cfg, f, grid) -> PipelineResult:
    src, tgt, conn = _connection(cfg, f, grid)
    margin = cfg.thresholds["transversality_margin"]
    rep0 = transversality_report(f, conn, t_star=_p(cfg, "t_star"), margin=margin)
    n = int(_p(cfg, "n_tstar", 5))
    t0, t1 = conn.trajectory.t0, conn.trajectory.t1
    ts = np.linspace(t0 + 0.25 * (t1 - t0), t1, n) if n > 0 else np.empty(0)
    scan = [transversality_report(f, conn, t_star=float(t), margin=margin) for t in ts]
    rep = dict(rep0.to_json())
    rep.update({"source": _element_json(src), "target": _element_json(tgt), "connection": conn.to_json(),
                "t_star_scan": [{"t_star": r.t_star, "smallest_singular_value": r.smallest_singular_value,
                                 "rank_decision": r.rank_decision} for r in scan],
                "decision_stable": all(r.rank_decision == rep0.rank_decision for r in scan)})
    data, plot = _connection_tables(conn)
    data["pairing_matrix"] = Table([f"c{j}" for j in range(rep0.pairing_matrix.shape[1])],
                                   rep0.pairing_matrix.tolist())
    sv = [r.smallest_singular_value for r in scan]
    plot["tstar_scan"] = Table.from_columns({"t_star": ts, "smallest_singular_value": np.array(sv, dtype=float)})
    n0 = grid.axes[0].n
    rows = [[n0, rep0.smallest_singular_value, rep0.rank_decision]]
    if _p(cfg, "refine", True):
        # the margin's resolution dependence is empirical, so re-solve everything at 2n
        g2 = _grid_for(cfg)(2 * n0)
        _, _, c2 = _connection(cfg, f, g2)
        r2 = transversality_report(f, c2, t_star=_p(cfg, "t_star"), margin=margin)
        rows.append([2 * n0, r2.smallest_singular_value, r2.rank_decision])
    rep["refinement"] = [{"resolution": n, "smallest_singular_value": s_, "rank_decision": d} for n, s_, d in rows]
    plot["refinement"] = Table(["resolution", "smallest_singular_value", "rank_decision"], rows)
    return PipelineResult("transversality", rep, data, plot)


def _family_builder(cfg, f, grid_for):
    """Return ``build(n)`` producing the family at resolution ``n``."""
    src = _p(cfg, "family", "trajectory")
    if src == "expr":
        T = float(_p(cfg, "T", 1.0))
        n_t = int(_p(cfg, "n_times", 33))
        expr = _p(cfg, "v")
        if expr is None:
            raise ConfigError("nodal family 'expr' needs 'v'")

        def build(n, refine=1):
            g = grid_for(n)
            fn = space_time_function(expr, g.dim)
            return SampledFamily.from_function(g, np.linspace(0.0, T, refine * (n_t - 1) + 1), fn)
        return build
    if src == "orbit":
        def build(n, refine=1):
            g = grid_for(n)
            orb = find_periodic_orbit(f, g, initial_state(g, _p(cfg, "guess", 0.0)), float(_p(cfg, "period", 1.0)),
                                      n_steps=cfg.solver["orbit_steps"] * refine, tol=cfg.solver["orbit_tol"])
            return SampledFamily.time_derivative(f, orb.samples)
        return build
    if src == "trajectory":
        def build(n, refine=1):
            g = grid_for(n)
            T = float(_p(cfg, "T", 1.0))
            tr = integrate(f, g, initial_state(g, _p(cfg, "u0", 0.0)), T, cfg.solver["dt"] / refine,
                           scheme=cfg.solver["scheme"], stride=cfg.solver["stride"])
            return SampledFamily.time_derivative(f, tr)
        return build
    raise ConfigError(f"unknown nodal family source {src!r}")


def _grid_for(cfg):
    spec = cfg.domain_spec()

    def make(n):
        return build_grid(spec, n if cfg.domain["kind"] != "rectangle" else [n, n])
    return make


def nodal(cfg, f, grid) -> PipelineResult:
    th = cfg.thresholds
    n0 = grid.axes[0].n
    build = _family_builder(cfg, f, _grid_for(cfg))
    fam = build(n0)
    s = singular_nodal_scan(fam, eta_v=th["eta_v"], eta_g=th["eta_g"])
    rep = s.to_json()
    plot = {}
    if _p(cfg, "refine", True):
        ref = tns_refinement(lambda n: build(n, refine=n // n0), [n0, 2 * n0], eta_v=th["eta_v"], eta_g=th["eta_g"])
        rep["refinement"] = ref
        plot["refinement"] = Table(["resolution", "projection_cover", "tns_estimate"],
                                   [[r["resolution"], r["projection_cover"], r["tns_estimate"]] for r in ref["rows"]])
    rep["tns_estimate"] = tns_estimate(s)
    return PipelineResult("nodal", rep, {"nodal_points": Table(s.csv_header(), s.csv_rows())}, plot)


def _probes(cfg, grid):
    n = int(_p(cfg, "n_probes", 8))
    if _p(cfg, "probe_selection", "even") == "random":
        idx = np.sort(cfg.rng().choice(grid.size, size=min(n, grid.size), replace=False))
    else:
        idx = np.unique(np.linspace(0, grid.size - 1, n).round().astype(int))
    return [grid.nodes[j].copy() for j in idx]


def observe(cfg, f, grid) -> PipelineResult:
    th = cfg.thresholds
    probes = _probes(cfg, grid)
    kw = {"eta_derivative": th["eta_derivative"], "eta_match": th["eta_match"]}
    if _p(cfg, "mode", "period") == "period":
        orb = _orbit(cfg, f, grid, _p(cfg, "guess", 0.0), _p(cfg, "period"))
        shift = _p(cfg, "separation_shift")
        other = orb.shifted(int(round(float(shift) * len(orb.phase_states())))) if shift is not None else None
        rep = period_observability(orb, probes, other=other, **kw)
    else:
        T = float(_p(cfg, "T", 1.0))
        tr = integrate(f, grid, initial_state(grid, _p(cfg, "u0", 0.0)), T, cfg.solver["dt"],
                       scheme=cfg.solver["scheme"], stride=cfg.solver["stride"])
        rep = injectivity_scan(tr, probes, f=f, **kw)
    rows = [[k, a, b] for k, v in sorted(rep.violations.items()) for a, b in v]
    good = Table(["probe"] + ["x", "y"][: grid.dim] + ["good"],
                 [[k] + list(map(float, p)) + [int(g)] for k, (p, g) in enumerate(zip(rep.probes, rep.per_probe_good))])
    return PipelineResult("observe", rep.to_json(), {"violations": Table(["probe", "t", "t_prime"], rows)},
                          {"probes": good})


def perturb(cfg, f, grid) -> PipelineResult:
    mode = _p(cfg, "mode", "pairing")
    if mode == "colinear":
        orb = _orbit(cfg, f, grid, _p(cfg, "guess", 0.0), _p(cfg, "period"))
        V = np.asarray(_p(cfg, "V", [1.0, 0.0]), dtype=float)
        g = colinear_avoiding_perturbation(orb, V, f)
        rep = {"mode": "colinear", "construction": g.to_json()}
        return PipelineResult("perturb", rep)
    if mode != "pairing":
        raise ConfigError(f"unknown perturb mode {mode!r}")
    m = float(_p(cfg, "m", 0.5))
    u0 = initial_state(grid, _p(cfg, "u0", 0.0))
    psi = initial_state(grid, _p(cfg, "psi", 1.0))
    w = _p(cfg, "window")
    if w is None or len(w) != 2 * grid.dim + 2:
        raise ConfigError("perturb needs window = [x_lo, (y_lo,) x_hi, (y_hi,) t_lo, t_hi]")
    d = grid.dim
    win = SpaceTimeBox(w[:d], w[d:2 * d], float(w[2 * d]), float(w[2 * d + 1]))
    dt = cfg.solver["dt"]
    tr = integrate(f, grid, u0, m, dt, scheme=cfg.solver["scheme"])
    co = linearize_along(f, tr)
    Z = evaluation_triples(grid, tr.states).reshape(-1, 2 * d + 1)
    pad = float(_p(cfg, "box_margin", 1.0))
    lo, hi = Z.min(axis=0) - pad, Z.max(axis=0) + pad
    for i, (a, b) in enumerate(grid.domain.extents):
        lo[i], hi[i] = a, b
    bump = build_bump(tr, win, lo, hi, inflation=cfg.thresholds["inflation"],
                      orient=lambda b: pairing_integral(b, tr, co, psi, m))
    ex = run_pairing_experiment(f, grid, u0, m, bump, psi, dt=dt, scheme=cfg.solver["scheme"],
                                eps=float(_p(cfg, "eps", 1e-4)), traj=tr)
    rep = {"mode": "pairing", "search_window": {"lo": list(win.lo), "hi": list(win.hi), "t": [win.t0, win.t1]},
           **ex.to_json()}
    cols = dict(_grid_columns(grid))
    cols.update({"derivative": ex.derivative, "fd_derivative": ex.fd_derivative})
    return PipelineResult("perturb", rep, {"derivative": Table.from_columns(cols)})


def derivative_check(cfg, f, grid) -> PipelineResult:
    rng = cfg.rng()
    u0 = initial_state(grid, _p(cfg, "u0", 0.0))
    T = float(_p(cfg, "T", 0.2))
    eps = float(_p(cfg, "eps", 1e-4))
    n = int(_p(cfg, "n_directions", 5))
    s = cfg.solver
    tr = integrate(f, grid, u0, T, s["dt"], scheme=s["scheme"])
    co = linearize_along(f, tr)
    errs = []
    for _ in range(n):
        v = random_smooth(grid, rng)
        up = integrate(f, grid, u0 + eps * v, T, s["dt"], scheme=s["scheme"]).final
        Uv = propagate(co, v, 0.0, T)
        errs.append(float(grid.norm((up - tr.final) / eps - Uv) / grid.norm(Uv)))
    rep = {"T": T, "eps": eps, "relative_errors": errs, "max_relative_error": max(errs) if errs else None}
    return PipelineResult("derivative-check", rep,
                          {"errors": Table(["direction", "relative_error"], [[i, e] for i, e in enumerate(errs)])})


PIPELINES = {
    "simulate": simulate,
    "equilibria": equilibria,
    "orbit": orbit,
    "spectrum": spectrum,
    "connect": connect,
    "transversality": transversality,
    "nodal": nodal,
    "observe": observe,
    "perturb": perturb,
    "derivative-check": derivative_check,
}


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    grid = cfg.grid()
    f = cfg.nonlinearity()
    return PIPELINES[cfg.name](cfg, f, grid)
