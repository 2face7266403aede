"""Unstable and adjoint normal frames, rates, connections and transversality."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .critical import (CriticalElement, Equilibrium, PeriodicOrbit, equilibrium_spectrum, jacobian,
                       period_map, period_map_spectrum, w_orthonormalize)
from .errors import BlowUp, NotFound
from .grid import Grid
from .nonlinearity import NonlinearField
from .semiflow import TrajectorySegment, integrate, vector_field
from .tangent import constant_coefficients, linearize_along, propagate, propagate_adjoint

log = logging.getLogger(__name__)

TUBE_RADIUS = 1e-2
TRANSVERSALITY_MARGIN = 1e-6
RADIUS_CAP = 0.1


@dataclass(eq=False)
class TangentFrame:
    base: CriticalElement
    vectors: np.ndarray  # (N, k), weighted-orthonormal columns
    kind: str  # "unstable" | "adjoint_stable_normal"
    anchor_phase: float = 0.0
    exponents: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def zero_index(self) -> bool:
        return self.size == 0


def _spectrum(f, el: CriticalElement):
    if el.spectrum is not None:
        return el.spectrum
    return equilibrium_spectrum(f, el) if isinstance(el, Equilibrium) else period_map_spectrum(f, el)


def _sign_fix(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return V


def _realify(vals: np.ndarray, vecs: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols, ex = [], []
    used = set()
    for i in np.where(keep)[0]:
        if i in used:
            continue
        lam, v = vals[i], vecs[:, i]
        if abs(lam.imag) > 1e-10 * max(1.0, abs(lam)):
            # take the conjugate partner out of the list
            partner = [j for j in np.where(keep)[0] if j not in used and j != i
                       and abs(vals[j] - np.conj(lam)) <= 1e-8 * max(1.0, abs(lam))]
            if partner:
                used.add(partner[0])
            cols += [v.real, v.imag]
            ex += [lam, np.conj(lam)]
        else:
            cols.append(np.real(v))
            ex.append(lam)
        used.add(i)
    if not cols:
        return np.empty((vecs.shape[0], 0)), np.empty(0, dtype=complex)
    return np.column_stack(cols), np.array(ex)


def _frame(grid: Grid, V: np.ndarray) -> np.ndarray:
    if V.shape[1] == 0:
        return V
    return _sign_fix(w_orthonormalize(grid, _sign_fix(V)))


def _trivial_mask(spec, mu: np.ndarray) -> np.ndarray:
    mask = np.ones(mu.size, dtype=bool)
    if spec.trivial_index is not None:
        mask[spec.trivial_index] = False
    return mask


def unstable_frame(f: NonlinearField, element: CriticalElement) -> TangentFrame:
    spec = _spectrum(f, element)
    grid = element.grid
    if isinstance(element, Equilibrium):
        lam = spec.all_eigenvalues
        V, ex = _realify(lam, spec.vectors, lam.real > 0)
    else:
        mu = spec.all_multipliers
        V, ex = _realify(mu, spec.vectors, (np.abs(mu) > 1.0 + spec.margin) & _trivial_mask(spec, mu))
    return TangentFrame(element, _frame(grid, V), "unstable", 0.0, ex)


def adjoint_stable_normal_frame(f: NonlinearField, element: CriticalElement) -> TangentFrame:
    """Adjoint unstable eigenvectors; they annihilate the local stable tangent space."""
    spec = _spectrum(f, element)
    grid = element.grid
    w = grid.weights
    if isinstance(element, Equilibrium):
        if f.gradient_free:
            fr = unstable_frame(f, element)
            return TangentFrame(element, fr.vectors.copy(), "adjoint_stable_normal", 0.0, fr.exponents)
        J = jacobian(f, grid, element.state, dense=True)
        lam, vec = sla.eig(J.T * w[None, :] / w[:, None])
        V, ex = _realify(lam, vec, lam.real > 0)
    else:
        P = period_map(f, element)
        mu, vec = sla.eig(P.T * w[None, :] / w[:, None])
        triv = spec.all_multipliers[spec.trivial_index]
        mask = (np.abs(mu) > 1.0 + spec.margin) & (np.abs(mu - triv) > spec.margin)
        V, ex = _realify(mu, vec, mask)
    return TangentFrame(element, _frame(grid, V), "adjoint_stable_normal", 0.0, ex)


# --- rates -----------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    rate: float
    ci: tuple[float, float]
    per_vector: tuple[float, ...] = ()


def _fit(times: np.ndarray, norms: np.ndarray) -> tuple[float, float]:
    res = stats.linregress(times, np.log(norms))
    return float(res.slope), float(1.96 * res.stderr)


def stable_projection(grid: Grid, unstable: np.ndarray, normals: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Remove the unstable component of ``v`` along the biorthogonal pair."""
    if unstable.shape[1] == 0:
        return v
    M = normals.T @ (grid.weights[:, None] * unstable)
    c = np.linalg.solve(M, normals.T @ (grid.weights * v))
    return v - unstable @ c


def rate_estimate(f: NonlinearField, element: CriticalElement, frame: TangentFrame, horizon: float, *,
                  n_steps: int = 400, rng: np.random.Generator | None = None,
                  vectors: np.ndarray | None = None) -> tuple[RateFit | None, RateFit]:
    """Fitted growth (weakest frame direction) and decay exponents with 95% intervals."""
    grid = element.grid
    rng = rng or np.random.default_rng(0)
    V = frame.vectors if vectors is None else np.asarray(vectors, dtype=float).reshape(grid.size, -1)
    if V.shape[1] and np.any(grid.norm(V) == 0):
        raise ValueError("frame contains a zero vector")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    normals = adjoint_stable_normal_frame(f, element).vectors
    v = rng.standard_normal(grid.size)
    # smooth the random direction so the fit sees the slowest stable modes
    v = np.linalg.solve(np.eye(grid.size) - 1e-3 * grid.lap.dense(), v)
    v = stable_projection(grid, frame.vectors, normals, v)
    if grid.norm(v) == 0:
        raise ValueError("stable complement is trivial")
    X = np.column_stack([V, v]) if V.shape[1] else v[:, None]

    if isinstance(element, Equilibrium):
        p = np.stack([g @ element.state for g in grid.grads], axis=-1)
        a = f.du(grid.nodes, element.state, p)
        b = np.moveaxis(np.asarray(f.dp(grid.nodes, element.state, p)).reshape(grid.size, grid.dim), -1, 0)
        coeffs = constant_coefficients(grid, a, b, 0.0, horizon, horizon / n_steps, "ars343")
        times, hist = propagate(coeffs, X, 0.0, horizon, history=True)
        if V.shape[1]:
            # round-off re-excites unstable modes; restart the decay column from its projection
            times, hist = _projected_history(coeffs, grid, X, frame.vectors, normals, horizon, hist)
    else:
        P = period_map(f, element)
        K = int(math.floor(horizon / element.period))
        if K < 3:
            raise ValueError("horizon too short: need at least three periods")
        hist = [X]
        for _ in range(K):
            hist.append(P @ hist[-1])
        hist = np.array(hist)
        times = element.period * np.arange(K + 1)
    norms = np.sqrt(np.einsum("i,tij,tij->tj", grid.weights, hist, hist))
    window = times >= 0.5 * times[-1]
    if np.sum(window) < 3 or (isinstance(element, Equilibrium) and np.sum(window) < 16):
        raise ValueError("horizon too short for a stable fit")
    fits = [_fit(times[window], norms[window, j]) for j in range(norms.shape[1])]
    span = times[window][-1] - times[window][0]
    if all(abs(s) * span < 0.5 for s, _ in fits):
        raise ValueError("horizon too short: norms barely change over the fit window")
    dec = RateFit(fits[-1][0], (fits[-1][0] - fits[-1][1], fits[-1][0] + fits[-1][1]))
    if V.shape[1] == 0:
        return None, dec
    g = fits[:-1]
    j = int(np.argmin([s for s, _ in g]))
    grow = RateFit(g[j][0], (g[j][0] - g[j][1], g[j][0] + g[j][1]), tuple(s for s, _ in g))
    return grow, dec


def _projected_history(coeffs, grid, X, unstable, normals, horizon, hist, chunks: int = 40):
    edges = np.linspace(0.0, horizon, chunks + 1)
    col = X[:, -1].copy()
    ts, out = [0.0], [col.copy()]
    for lo, hi in zip(edges[:-1], edges[1:]):
        t_k, h_k = propagate(coeffs, col, lo, hi, history=True)
        col = stable_projection(grid, unstable, normals, h_k[-1])
        ts.extend(t_k[1:])
        out.extend(h_k[1:-1])
        out.append(col.copy())
    times = np.array(ts)
    if times.size != hist.shape[0] or not np.allclose(times, coeffs.step_points(0.0, horizon)):
        raise RuntimeError("step grids do not line up")
    hist = hist.copy()
    hist[:, :, -1] = np.array(out)
    return times, hist


# --- global unstable set ---------------------------------------------------

@dataclass(eq=False)
class GrowthResult:
    trajectories: list
    coords: list
    dropped: list  # (coords, t_star)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def _seed_coords(k: int, n_seeds: int, rng: np.random.Generator) -> list[np.ndarray]:
    if k == 0:
        return []
    if k == 1:
        return [np.array([1.0]), np.array([-1.0])][: max(1, min(n_seeds, 2))]
    if k == 2:
        th = 2 * np.pi * np.arange(n_seeds) / n_seeds
        return [np.array([math.cos(t), math.sin(t)]) for t in th]
    out = []
    for _ in range(n_seeds):
        c = rng.standard_normal(k)
        out.append(c / np.linalg.norm(c))
    return out


def grow_unstable(f: NonlinearField, element: CriticalElement, frame: TangentFrame, radius: float,
                  n_seeds: int, m: float, *, dt: float = 1e-3, scheme: str = "cn", stride: int = 1,
                  rng: np.random.Generator | None = None, radius_cap: float = RADIUS_CAP) -> GrowthResult:
    """Integrate seeds anchor + radius * (frame combination) for time ``m``."""
    if not 0 < radius <= radius_cap:
        raise ValueError(f"radius must lie in (0, {radius_cap}]")
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    rng = rng or np.random.default_rng(0)
    coords = _seed_coords(frame.size, n_seeds, rng)
    grid = element.grid
    out = GrowthResult([], [], [])
    for c in coords:
        u0 = element.anchor + radius * (frame.vectors @ c)
        try:
            out.trajectories.append(integrate(f, grid, u0, m, min(dt, m), scheme=scheme, stride=stride))
            out.coords.append(c)
        except BlowUp as exc:
            out.dropped.append((c, exc.t_star))
    if coords and not out.trajectories:
        raise BlowUp(min(t for _, t in out.dropped), math.inf)
    return out


# --- connections -----------------------------------------------------------

def distance_to(element: CriticalElement, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted distance of each state to the element, with matched phase index."""
    grid = element.grid
    states = np.atleast_2d(states)
    if isinstance(element, Equilibrium):
        d = grid.norm((states - element.state).T)
        return np.atleast_1d(d), np.zeros(len(states), dtype=int)
    P = element.phase_states()
    w = grid.weights
    # ||s - p||^2 = s.Ws - 2 s.Wp + p.Wp
    ss = np.einsum("i,ti,ti->t", w, states, states)
    pp = np.einsum("i,pi,pi->p", w, P, P)
    cross = states @ (w[:, None] * P.T)
    d2 = np.maximum(ss[:, None] - 2 * cross + pp[None, :], 0.0)
    j = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(states)), j]), j


@dataclass(eq=False)
class ConnectingOrbit:
    source: CriticalElement
    target: CriticalElement
    trajectory: TrajectorySegment
    entry_time: float | None
    departure_data: np.ndarray
    terminal_distance: float
    initial_distance: float
    target_phase_index: int = 0
    probes: int = 0

    def to_json(self) -> dict:
        return {"entry_time": self.entry_time, "departure_coords": self.departure_data.tolist(),
                "terminal_distance": self.terminal_distance, "initial_distance": self.initial_distance,
                "duration": self.trajectory.t1 - self.trajectory.t0, "probes": self.probes}


@dataclass
class _Probe:
    coords: np.ndarray
    traj: TrajectorySegment | None
    dist: np.ndarray | None
    phase: np.ndarray | None
    entry: int | None
    closest: int | None
    side: float


def _probe(f, source, target, frame, coords, radius, horizon, dt, scheme, tube, normal) -> _Probe:
    u0 = source.anchor + radius * (frame.vectors @ coords)
    try:
        tr = integrate(f, source.grid, u0, horizon, dt, scheme=scheme)
    except BlowUp:
        return _Probe(coords, None, None, None, None, None, 0.0)
    d, ph = distance_to(target, tr.states)
    outside = np.where(d > tube)[0]
    entry = closest = None
    if outside.size:
        after = np.where((d <= tube) & (np.arange(d.size) > outside[0]))[0]
        if after.size:
            entry = int(after[0])
            # closest approach within the first visit to the tube
            leave = np.where((d > tube) & (np.arange(d.size) > entry))[0]
            stop = int(leave[0]) if leave.size else d.size
            closest = entry + int(np.argmin(d[entry:stop]))
    side = 0.0
    if normal is not None:
        if isinstance(target, Equilibrium):
            side = float(np.sign(target.grid.inner(normal, tr.final - target.state)))
        else:
            side = float(np.sign(target.grid.inner(normal, tr.final - target.phase_states()[ph[-1]])))
    return _Probe(coords, tr, d, ph, entry, closest, side)


def shoot_connection(f: NonlinearField, source: CriticalElement, target: CriticalElement,
                     frame: TangentFrame | None = None, *, radius: float = 1e-2, horizon: float = 5.0,
                     dt: float = 1e-3, scheme: str = "cn", tube: float = TUBE_RADIUS, n_angles: int = 16,
                     max_bisect: int = 52, refine_after_hit: int = 6) -> ConnectingOrbit:
    """Search the seed sphere of the source for a trajectory entering the target tube."""
    frame = frame or unstable_frame(f, source)
    if frame.size == 0:
        raise ValueError("source has Morse index 0: no unstable directions to shoot from")
    normals = adjoint_stable_normal_frame(f, target).vectors
    normal = normals[:, 0] if normals.shape[1] else None
    k = frame.size

    def probe(c):
        return _probe(f, source, target, frame, c, radius, horizon, dt, scheme, tube, normal)

    if k == 1:
        probes = [probe(np.array([1.0])), probe(np.array([-1.0]))]
    else:
        th = 2 * np.pi * np.arange(n_angles) / n_angles

        def at(t):
            c = np.zeros(k)
            c[0], c[1] = math.cos(t), math.sin(t)
            return probe(c)

        scan = [at(t) for t in th]
        probes = list(scan)
        brackets = []
        if normal is not None:
            for i in range(n_angles):
                a, b = scan[i], scan[(i + 1) % n_angles]
                if a.side * b.side < 0 and a.traj is not None and b.traj is not None:
                    brackets.append((min(a.dist.min(), b.dist.min()), i))
        # closest bracket first; stop a few refinements after the first hit
        for _, i in sorted(brackets):
            lo, hi = th[i], th[i] + 2 * np.pi / n_angles
            s_lo = scan[i].side
            extra = None
            for _ in range(max_bisect):
                mid = 0.5 * (lo + hi)
                if mid in (lo, hi):
                    break
                pm = at(mid)
                probes.append(pm)
                if pm.traj is None or pm.side == 0:
                    break
                if pm.entry is not None and extra is None:
                    extra = refine_after_hit
                if extra is not None:
                    extra -= 1
                    if extra < 0:
                        break
                if pm.side == s_lo:
                    lo = mid
                else:
                    hi = mid
            if any(p.entry is not None for p in probes):
                break
    hits = [p for p in probes if p.entry is not None]
    if not hits:
        raise NotFound(f"no probe entered the target tube (radius {tube:g}) within horizon {horizon:g}")
    best = min(hits, key=lambda p: p.dist[p.closest])
    tr = best.traj.truncated(best.closest)
    return ConnectingOrbit(source, target, tr, float(tr.times[best.entry]), best.coords.copy(),
                           float(best.dist[best.closest]), float(best.dist[0]),
                           int(best.phase[best.closest]), len(probes))


# --- transversality --------------------------------------------------------

@dataclass(eq=False)
class TransversalityReport:
    pairing_matrix: np.ndarray
    singular_values: np.ndarray
    smallest_singular_value: float
    rank_decision: str
    t_star: float
    margin: float
    note: str = ""

    def to_json(self) -> dict:
        s = self.smallest_singular_value
        return {
            "pairing_matrix": self.pairing_matrix.tolist(),
            "shape": list(self.pairing_matrix.shape),
            "singular_values": self.singular_values.tolist(),
            "smallest_singular_value": float(s) if np.isfinite(s) else None,
            "rank_decision": self.rank_decision,
            "t_star": self.t_star,
            "margin": self.margin,
            "note": self.note,
        }


def _chunked(coeffs, X, s, t, chunk, adjoint: bool):
    grid = coeffs.grid
    if adjoint:
        edges = np.arange(t, s, -chunk)
        edges = np.append(edges, s)
        for hi, lo in zip(edges[:-1], edges[1:]):
            X = propagate_adjoint(coeffs, X, hi, lo)
            X = w_orthonormalize(grid, X)
        return X
    edges = np.append(np.arange(s, t, chunk), t)
    for lo, hi in zip(edges[:-1], edges[1:]):
        X = propagate(coeffs, X, lo, hi)
        X = w_orthonormalize(grid, X)
    return X


def _target_normals(f, target: CriticalElement, phase_index: int) -> np.ndarray:
    if isinstance(target, Equilibrium) or phase_index == 0:
        return adjoint_stable_normal_frame(f, target).vectors
    # rebase the orbit at the matched phase so its period map starts there
    s = target.samples
    p0 = target.phase_states()[phase_index]
    tr = integrate(f, target.grid, p0, target.period, s.dt, scheme=s.scheme)
    shifted = PeriodicOrbit(tr, target.period, target.section, target.closure_defect)
    period_map_spectrum(f, shifted)
    return adjoint_stable_normal_frame(f, shifted).vectors


def transversality_report(f: NonlinearField, orbit: ConnectingOrbit, *, t_star: float | None = None,
                          margin: float = TRANSVERSALITY_MARGIN, chunk: float = 0.05,
                          source_vectors: np.ndarray | None = None,
                          target_normals: np.ndarray | None = None) -> TransversalityReport:
    """Pairing of propagated source tangents against back-propagated target normals."""
    traj = orbit.trajectory
    grid = traj.grid
    t0, t1 = traj.t0, traj.t1
    ts = orbit.entry_time if t_star is None else float(t_star)
    if orbit.entry_time is None:
        return TransversalityReport(np.zeros((0, 0)), np.empty(0), math.inf, "empty_intersection",
                                    float("nan"), margin, "trajectory never entered the target tube")
    if not t0 <= ts <= t1:
        raise ValueError(f"t_star={ts} outside the orbit window [{t0}, {t1}]")
    if source_vectors is None:
        Xi = unstable_frame(f, orbit.source).vectors
        if isinstance(orbit.source, PeriodicOrbit):
            dp = vector_field(f, grid, orbit.source.anchor)
            Xi = np.column_stack([Xi, dp / grid.norm(dp)])
    else:
        Xi = np.asarray(source_vectors, dtype=float).reshape(grid.size, -1)
    Psi = _target_normals(f, orbit.target, orbit.target_phase_index) if target_normals is None \
        else np.asarray(target_normals, dtype=float).reshape(grid.size, -1)
    rows, cols = Psi.shape[1], Xi.shape[1]
    if rows == 0:
        return TransversalityReport(np.zeros((0, cols)), np.empty(0), math.inf, "transverse", ts, margin,
                                    "target has Morse index 0")
    coeffs = linearize_along(f, traj)
    Xs = _chunked(coeffs, Xi, t0, ts, chunk, adjoint=False) if ts > t0 else w_orthonormalize(grid, Xi)
    Ps = _chunked(coeffs, Psi, ts, t1, chunk, adjoint=True) if t1 > ts else w_orthonormalize(grid, Psi)
    M = Ps.T @ (grid.weights[:, None] * Xs)
    sv = np.linalg.svd(M, compute_uv=False)
    smin = float(sv.min()) if rows <= cols else 0.0
    scale = float(np.max(grid.norm(Xs)) * np.max(grid.norm(Ps)))
    if rows > cols:
        decision, note = "non_transverse", "more independent normals than tangents"
    else:
        decision, note = ("transverse" if smin > margin * scale else "non_transverse"), ""
    return TransversalityReport(M, np.sort(sv), smin, decision, ts, margin, note)


def transversality_scan(f: NonlinearField, orbit: ConnectingOrbit, t_stars, **kw) -> list[TransversalityReport]:
    return [transversality_report(f, orbit, t_star=t, **kw) for t in t_stars]
