"""Singular nodal sets and pointwise observability diagnostics.

A singular nodal point of a sampled family v(x, t, tau) is a cell where
both |v| and |grad_x v| fall below declared thresholds.  Observability
scans look at the curve t -> (u(x0, t), grad u(x0, t)) seen by a single
probe and test whether it is regular and injective.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .critical import Equilibrium, PeriodicOrbit
from .grid import Grid
from .nonlinearity import NonlinearField
from .semiflow import TrajectorySegment, integrate, vector_field

ETA_V = 1e-6
ETA_G = 1e-6
Q_MAX = 4
MIN_SAMPLES = 16


# --- sampled families ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampledFamily:
    """Values of v on grid x times x taus, stored as ``(n_tau, n_t, N)``."""

    grid: Grid
    times: np.ndarray
    taus: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        tau = np.atleast_1d(np.asarray(self.taus, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[None]
        if v.shape != (tau.size, t.size, self.grid.size):
            raise ValueError(f"values shape {v.shape} does not match (taus, times, nodes)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "taus", tau)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, times, fn, taus=(0.0,), label: str = "") -> "SampledFamily":
        """``fn(x, t, tau)`` with ``x`` of shape ``(N, d)``; returns ``(N,)``."""
        times, taus = np.atleast_1d(times), np.atleast_1d(taus)
        vals = np.array([[np.broadcast_to(fn(grid.nodes, t, tau), (grid.size,)) for t in times]
                         for tau in taus], dtype=float)
        return cls(grid, times, taus, vals, label)

    @classmethod
    def time_derivative(cls, f: NonlinearField, traj: TrajectorySegment) -> "SampledFamily":
        """p_t = Lap p + f(x, p, grad p) evaluated on every stored state."""
        vals = np.array([vector_field(f, traj.grid, u) for u in traj.states])
        return cls(traj.grid, traj.times, [0.0], vals[None], "time_derivative")

    @classmethod
    def difference(cls, traj1: TrajectorySegment, traj2: TrajectorySegment) -> "SampledFamily":
        if traj1.states.shape != traj2.states.shape:
            raise ValueError("trajectories are sampled differently")
        return cls(traj1.grid, traj1.times, [0.0], (traj1.states - traj2.states)[None], "difference")


def _multi_indices(d: int, q: int):
    return [a for a in itertools.product(range(q + 1), repeat=d) if sum(a) == q]


def _derivative_magnitudes(grid: Grid, v: np.ndarray, q_max: int) -> np.ndarray:
    """max over |alpha| = q of |D^alpha v|, for q = 0..q_max; ``v`` is ``(n_t, N)``.

    Mixed derivatives are products of the grid's first-derivative operators.
    """
    out = np.empty((q_max + 1,) + v.shape)
    out[0] = np.abs(v)
    cache = {(0,) * grid.dim: v.T}
    for q in range(1, q_max + 1):
        mags = np.zeros(v.shape)
        for a in _multi_indices(grid.dim, q):
            k = next(i for i in range(grid.dim) if a[i])
            prev = tuple(a[i] - (i == k) for i in range(grid.dim))
            cache[a] = grid.grads[k] @ cache[prev]
            mags = np.maximum(mags, np.abs(cache[a].T))
        out[q] = mags
    return out


def _gradient_norm(grid: Grid, v: np.ndarray) -> np.ndarray:
    return np.sqrt(sum((g @ v.T).T ** 2 for g in grid.grads))


# --- vanishing order -------------------------------------------------------

def vanishing_order(family: SampledFamily, x0, t0: float, tau_index: int = 0, *,
                    q_max: int = Q_MAX, eta: float = ETA_V) -> int:
    """Smallest q <= q_max with a nonvanishing order-q spatial derivative at (x0, t0).

    Each order is compared with its own maximum over the sampled window.
    ``q_max + 1`` signals a suspected infinite-order zero.
    """
    grid = family.grid
    j = grid.node_index(x0)
    ts = family.times
    lo, hi = ts[0], ts[-1]
    if not lo - 1e-12 <= t0 <= hi + 1e-12:
        raise ValueError(f"t0={t0} outside the sampled window [{lo}, {hi}]")
    i = int(np.argmin(np.abs(ts - t0)))
    mags = _derivative_magnitudes(grid, family.values[tau_index], q_max)
    for q in range(q_max + 1):
        scale = mags[q].max()
        if scale > 0 and mags[q, i, j] > eta * scale:
            return q
    return q_max + 1


# --- singular nodal sets ---------------------------------------------------

@dataclass(eq=False)
class SingularNodalSet:
    grid: Grid
    tau_index: np.ndarray
    time_index: np.ndarray
    node_index: np.ndarray
    points: np.ndarray  # (k, d + 2): x..., t, tau
    strata: np.ndarray  # q >= 1
    projection_cover: float
    thresholds: dict
    scales: np.ndarray  # (n_tau, 2): value and gradient scale
    shape: tuple

    def __len__(self) -> int:
        return int(self.strata.size)

    @property
    def is_empty(self) -> bool:
        return self.strata.size == 0

    def recheck(self, family: SampledFamily) -> bool:
        """Re-evaluate the double-threshold test at every listed point."""
        ok = True
        for a, i, j in zip(self.tau_index, self.time_index, self.node_index):
            v = family.values[a, i]
            g = _gradient_norm(family.grid, v[None])[0]
            sv, sg = self.scales[a]
            ok &= abs(v[j]) <= self.thresholds["eta_v"] * sv and g[j] <= self.thresholds["eta_g"] * sg
        return bool(ok)

    def csv_header(self) -> list[str]:
        xs = ["x", "y"][: self.grid.dim]
        return xs + ["t", "tau", "q"]

    def csv_rows(self) -> list[list[float]]:
        return [list(map(float, p)) + [int(q)] for p, q in zip(self.points, self.strata)]

    def to_json(self) -> dict:
        return {
            "n_points": len(self),
            "projection_cover": self.projection_cover,
            "tns_estimate": tns_estimate(self),
            "strata_counts": {str(int(q)): int(np.sum(self.strata == q)) for q in np.unique(self.strata)},
            "thresholds": dict(self.thresholds),
            "shape": list(self.shape),
            "label": "empirical proxy",
        }


def singular_nodal_scan(family: SampledFamily, *, eta_v: float = ETA_V, eta_g: float = ETA_G,
                        q_max: int = Q_MAX) -> SingularNodalSet:
    """Cells with |v| <= eta_v*max|v| and |grad v| <= eta_g*max|grad v| (per tau slice).

    Stratum q of a point is its vanishing order minus one, so ordinary zeros
    (order 1) land in q = 0 and are dropped.
    """
    if not (eta_v > 0 and eta_g > 0):
        raise ValueError("thresholds must be positive")
    grid = family.grid
    n_tau, n_t, N = family.values.shape
    if n_t == 0 or n_tau == 0 or N == 0:
        raise ValueError("empty sampling window")
    rows, strata, scales = [], [], np.zeros((n_tau, 2))
    for a in range(n_tau):
        v = family.values[a]
        sv = float(np.max(np.abs(v)))
        if sv == 0.0:
            raise ValueError(f"family slice tau={family.taus[a]:g} vanishes identically")
        g = _gradient_norm(grid, v)
        sg = float(g.max())
        scales[a] = sv, sg
        hit = (np.abs(v) <= eta_v * sv) & (g <= eta_g * sg)
        if not hit.any():
            continue
        mags = _derivative_magnitudes(grid, v, q_max)
        mx = mags.reshape(q_max + 1, -1).max(axis=1)
        for i, j in zip(*np.nonzero(hit)):
            big = np.nonzero(mags[2:, i, j] > eta_v * np.where(mx[2:] > 0, mx[2:], np.inf))[0]
            order = int(big[0]) + 2 if big.size else q_max + 1
            rows.append((a, i, j))
            strata.append(order - 1)
    idx = np.array(rows, dtype=int).reshape(-1, 3)
    pts = np.column_stack([grid.nodes[idx[:, 2]], family.times[idx[:, 1]], family.taus[idx[:, 0]]]) \
        if idx.size else np.empty((0, grid.dim + 2))
    cells = {(i, j) for _, i, j in idx}
    cover = len(cells) / float(n_t * N)
    return SingularNodalSet(grid, idx[:, 0], idx[:, 1], idx[:, 2], pts, np.array(strata, dtype=int),
                            cover, {"eta_v": eta_v, "eta_g": eta_g, "q_max": q_max}, scales,
                            family.values.shape)


def tns_estimate(nodal_set: SingularNodalSet) -> float:
    """1 - projection_cover; an empirical proxy for density of the regular set."""
    return 1.0 - nodal_set.projection_cover


def tns_refinement(build, resolutions, **scan_kw) -> dict:
    """Cover and estimate across resolutions; ``build(n)`` returns a SampledFamily."""
    rows = []
    for n in resolutions:
        s = singular_nodal_scan(build(n), **scan_kw)
        rows.append({"resolution": int(n), "projection_cover": s.projection_cover,
                     "tns_estimate": tns_estimate(s), "n_points": len(s)})
    est = [r["tns_estimate"] for r in rows]
    return {"rows": rows, "non_decreasing": bool(all(b >= a for a, b in zip(est, est[1:]))),
            "label": "empirical proxy"}


# --- observability ---------------------------------------------------------

def _segment_distance(P0, P1, Q0, Q1):
    """Closest distance between segments [P0,P1] and [Q0,Q1] (rows), and the parameters."""
    d1, d2, r = P1 - P0, Q1 - Q0, P0 - Q0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    tiny = 1e-300
    sa, se = np.where(a > tiny, a, 1.0), np.where(e > tiny, e, 1.0)
    den = a * e - b * b
    s = np.where(den > 1e-14 * np.maximum(a * e, tiny), np.clip((b * f - c * e) / np.where(den > 0, den, 1.0), 0, 1), 0.0)
    t = (b * s + f) / se
    s = np.where(t < 0, np.clip(-c / sa, 0, 1), np.where(t > 1, np.clip((b - c) / sa, 0, 1), s))
    t = np.clip(t, 0, 1)
    s = np.where(a > tiny, s, 0.0)
    t = np.where(e > tiny, t, 0.0)
    t = np.where((a <= tiny) & (e > tiny), np.clip(f / se, 0, 1), t)
    gap = P0 + d1 * s[:, None] - Q0 - d2 * t[:, None]
    return np.sqrt(np.einsum("ij,ij->i", gap, gap)), s, t


def _evaluation_curve(grid: Grid, states: np.ndarray, j: int) -> np.ndarray:
    """(n_t, 1 + d) samples of (u(x_j, t), grad u(x_j, t))."""
    cols = [states[:, j]] + [(g @ states.T)[j] for g in grid.grads]
    return np.column_stack(cols)


def _self_violations(E, times, resolution, tol, period=None):
    n = len(E)
    closed = period is not None
    P0 = E
    P1 = np.roll(E, -1, axis=0) if closed else E[1:]
    n_seg = n if closed else n - 1
    P0 = P0[:n_seg]
    tseg = times[:n_seg]
    dts = (np.roll(times, -1)[:n_seg] - tseg) % period if closed else np.diff(times)
    hits = []
    for i in range(n_seg - 1):
        js = np.arange(i + 1, n_seg)
        gap = np.abs(tseg[js] - tseg[i])
        if closed:
            gap = np.minimum(gap, period - gap)
        js = js[gap > resolution]
        if js.size == 0:
            continue
        m = js.size
        dist, s, u = _segment_distance(np.repeat(P0[i:i + 1], m, 0), np.repeat(P1[i:i + 1], m, 0), P0[js], P1[js])
        for k in np.nonzero(dist <= tol)[0]:
            hits.append((float(tseg[i] + s[k] * dts[i]), float(tseg[js[k]] + u[k] * dts[js[k]])))
    return hits


def _thin(pairs, resolution):
    """Collapse near-duplicate pairs produced by adjacent segments."""
    out = []
    for p in sorted(pairs):
        if out and abs(p[0] - out[-1][0]) <= resolution and abs(p[1] - out[-1][1]) <= resolution:
            continue
        out.append(p)
    return out


@dataclass(eq=False)
class ObservabilityReport:
    probes: list
    window: tuple
    violations: dict  # probe index -> list of (t, t') pairs, both orders present
    derivative_zero_times: dict
    per_probe_good: list
    good_fraction: float
    thresholds: dict
    mode: str = "injectivity"
    separation: dict | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "probes": [list(map(float, p)) for p in self.probes],
            "window": list(self.window),
            "violations": {str(k): [list(p) for p in v] for k, v in self.violations.items()},
            "n_violations": {str(k): len(v) for k, v in self.violations.items()},
            "derivative_zero_times": {str(k): list(v) for k, v in self.derivative_zero_times.items()},
            "per_probe_good": list(self.per_probe_good),
            "good_fraction": self.good_fraction,
            "thresholds": dict(self.thresholds),
            "separation": self.separation,
        }


def _probe_scan(grid, states, times, dstates, probes, *, eta_d, eta_match, resolution, period):
    if len(times) < MIN_SAMPLES:
        raise ValueError(f"temporal resolution too coarse: {len(times)} samples (need >= {MIN_SAMPLES})")
    if not probes:
        raise ValueError("no probes given")
    span = (period if period is not None else times[-1] - times[0]) or 1.0
    if resolution is None:
        resolution = 2.5 * float(np.max(np.diff(times)))
    viol, dzero, good = {}, {}, []
    idx = [grid.node_index(x0) for x0 in probes]
    full = np.stack([states] + [(g @ states.T).T for g in grid.grads], axis=-1)
    dscale = max(float(np.max(np.linalg.norm(full, axis=-1))), 1e-300) / span
    for k, j in enumerate(idx):
        E = _evaluation_curve(grid, states, j)
        D = _evaluation_curve(grid, dstates, j)
        scale = float(np.max(np.linalg.norm(E, axis=1)))
        dn = np.linalg.norm(D, axis=1)
        dzero[k] = [float(t) for t in times[dn <= eta_d * dscale]]
        hits = _self_violations(E, times, resolution, eta_match * max(scale, 1e-300), period)
        hits = _thin(hits, resolution)
        viol[k] = sorted(hits + [(b, a) for a, b in hits])
        good.append(not viol[k] and not dzero[k])
    th = {"eta_derivative": eta_d, "eta_match": eta_match, "resolution": resolution}
    return [np.asarray(grid.nodes[j]).copy() for j in idx], viol, dzero, good, th


def injectivity_scan(traj: TrajectorySegment, probes, *, f: NonlinearField | None = None,
                     eta_derivative: float = 1e-6, eta_match: float = 1e-6,
                     resolution: float | None = None) -> ObservabilityReport:
    """Regularity and injectivity of t -> (u(x0,t), grad u(x0,t)) at each probe.

    The time derivative is the exact vector field when ``f`` is given, else
    second-order differences of the stored states.
    """
    grid, states, times = traj.grid, traj.states, traj.times
    if len(times) >= 2:
        dstates = (np.array([vector_field(f, grid, u) for u in states]) if f is not None
                   else np.gradient(states, times, axis=0, edge_order=2 if len(times) > 2 else 1))
    else:
        dstates = np.zeros_like(states)
    pts, viol, dz, good, th = _probe_scan(grid, states, times, dstates, list(probes), eta_d=eta_derivative,
                                          eta_match=eta_match, resolution=resolution, period=None)
    return ObservabilityReport(pts, (traj.t0, traj.t1), viol, dz, good, float(np.mean(good)), th)


def _cyclic_derivative(states: np.ndarray, period: float) -> np.ndarray:
    n = len(states)
    h = period / n
    return (np.roll(states, -1, axis=0) - np.roll(states, 1, axis=0)) / (2 * h)


def period_observability(orbit: PeriodicOrbit, probes, *, other=None, eta_derivative: float = 1e-6,
                         eta_match: float = 1e-6, resolution: float | None = None) -> ObservabilityReport:
    """Injectivity modulo the period; with ``other`` also the separation test.

    ``other`` is a PeriodicOrbit, an Equilibrium or an array of states.  In
    separation mode a probe is good when the two evaluation curves stay apart.
    """
    grid = orbit.grid
    states = orbit.phase_states()
    n = len(states)
    times = orbit.samples.times[:n] - orbit.samples.times[0]
    if resolution is None:
        resolution = 2.5 * orbit.period / n
    pts, viol, dz, good, th = _probe_scan(grid, states, times, _cyclic_derivative(states, orbit.period),
                                          list(probes), eta_d=eta_derivative, eta_match=eta_match,
                                          resolution=resolution, period=orbit.period)
    rep = ObservabilityReport(pts, (0.0, float(orbit.period)), viol, dz, good, float(np.mean(good)), th,
                              mode="period")
    if other is None:
        return rep
    if isinstance(other, PeriodicOrbit):
        o_states, o_closed = other.phase_states(), True
    elif isinstance(other, Equilibrium):
        o_states, o_closed = other.state[None], False
    else:
        o_states = np.atleast_2d(np.asarray(other, dtype=float))
        o_closed = False
    mins, sep, cross = [], [], {}
    for k, x0 in enumerate(pts):
        j = grid.node_index(x0)
        E = _evaluation_curve(grid, states, j)
        F = _evaluation_curve(grid, o_states, j)
        scale = max(float(np.max(np.linalg.norm(E, axis=1))), float(np.max(np.linalg.norm(F, axis=1))), 1e-300)
        E1 = np.roll(E, -1, axis=0)
        F1 = np.roll(F, -1, axis=0) if o_closed else (F[1:] if len(F) > 1 else F)
        F0 = F if o_closed or len(F) == 1 else F[:-1]
        best, pairs = math.inf, []
        for i in range(len(E)):
            m = len(F0)
            d, s, u = _segment_distance(np.repeat(E[i:i + 1], m, 0), np.repeat(E1[i:i + 1], m, 0), F0, F1)
            best = min(best, float(d.min()))
            for q in np.nonzero(d <= eta_match * scale)[0]:
                pairs.append((float(times[i] + s[q] * orbit.period / n), int(q)))
        mins.append(best)
        sep.append(best > eta_match * scale)
        cross[k] = len(pairs)
    rep.mode = "separation"
    rep.per_probe_good = list(sep)
    rep.good_fraction = float(np.mean(sep))
    rep.separation = {"min_distance": mins, "separated": sep, "n_matches": {str(k): v for k, v in cross.items()},
                      "same_orbit": bool(not any(sep))}
    return rep


# --- backward uniqueness ---------------------------------------------------

@dataclass(frozen=True)
class WitnessResult:
    initial_difference: float
    min_difference: float
    floor: float
    passed: bool


def backward_uniqueness_witness(f: NonlinearField, grid: Grid, pairs, horizon: float = 1.0,
                                dt: float = 1e-3, *, scheme: str = "cn",
                                floor_factor: float = 100.0) -> list[WitnessResult]:
    """Difference norms of trajectory pairs never reach the round-off floor.

    The floor is ``floor_factor * eps * max state norm`` over the run.
    """
    out = []
    for u0, v0 in pairs:
        a = integrate(f, grid, u0, horizon, dt, scheme=scheme).states
        b = integrate(f, grid, v0, horizon, dt, scheme=scheme).states
        diff = grid.norm((a - b).T)
        top = max(float(np.max(grid.norm(a.T))), float(np.max(grid.norm(b.T))), 1.0)
        floor = floor_factor * np.finfo(float).eps * top
        d0 = float(diff[0])
        out.append(WitnessResult(d0, float(diff.min()), float(floor),
                                 bool(d0 <= 1e-6 or diff.min() > floor)))
    return out
