"""Constructive perturbations of the nonlinearity and their first-order effect.

The flow derivative with respect to f in direction h is

    D(h) = int_0^m U(m, s) h(., u(s), grad u(s)) ds,

evaluated with the trapezoid rule on the stored steps.  Pairing it with a
final-time function psi_m equals the integral of <U(m, s)^* psi_m, h(s)>,
and the discrete adjoint makes the two agree to round-off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree

from .critical import Equilibrium, PeriodicOrbit
from .errors import ColinearEverywhere, NoGoodPoint, NonConvergence
from .grid import Grid
from .nonlinearity import NonlinearField, PerturbationBump, compose_perturbed, mollifier, mollifier_prime
from .semiflow import TrajectorySegment, integrate, vector_field
from .tangent import CoefficientField, linearize_along, propagate_adjoint

log = logging.getLogger(__name__)

INFLATION = 1.5


# --- evaluation triples ----------------------------------------------------

def evaluation_triples(grid: Grid, states: np.ndarray) -> np.ndarray:
    """(n_t, N, 2d+1) rows (x, u(x), grad u(x)) for stacked states."""
    states = np.atleast_2d(states)
    P = np.stack([(g @ states.T).T for g in grid.grads], axis=-1)
    X = np.broadcast_to(grid.nodes, states.shape + (grid.dim,))
    return np.concatenate([X, states[..., None], P], axis=-1)


def _avoid_triples(grid: Grid, item) -> np.ndarray:
    if isinstance(item, PeriodicOrbit):
        st = item.phase_states()
    elif isinstance(item, Equilibrium):
        st = item.state[None]
    elif isinstance(item, TrajectorySegment):
        st = item.states
    else:
        arr = np.asarray(item, dtype=float)
        if arr.ndim == 2 and arr.shape[1] == 2 * grid.dim + 1:
            return arr
        st = np.atleast_2d(arr)
    return evaluation_triples(grid, st).reshape(-1, 2 * grid.dim + 1)


@dataclass(frozen=True)
class SpaceTimeBox:
    """Axis-aligned window in Omega x [t0, t1]."""

    lo: np.ndarray
    hi: np.ndarray
    t0: float
    t1: float

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        if np.any(self.hi <= self.lo) or not self.t1 > self.t0:
            raise ValueError("empty space-time window")

    def contains(self, x: np.ndarray, t: np.ndarray, strict: bool = False) -> np.ndarray:
        x = np.asarray(x)
        t = np.asarray(t)
        if strict:
            return np.all((x > self.lo) & (x < self.hi), axis=-1) & (t > self.t0) & (t < self.t1)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1) & (t >= self.t0) & (t <= self.t1)


# --- bump construction -----------------------------------------------------

def composed_values(bump, grid: Grid, states: np.ndarray) -> np.ndarray:
    """h(x, u(x, t), grad u(x, t)) for every stored state: shape (n_t, N)."""
    Z = evaluation_triples(grid, states)
    d = grid.dim
    return np.asarray(bump.value(Z[..., :d], Z[..., d], Z[..., d + 1:]), dtype=float)


def build_bump(traj: TrajectorySegment, window: SpaceTimeBox, box_lo, box_hi, avoid=(), *,
               inflation: float = INFLATION, amplitude: float = 1.0, max_width: float = 0.25,
               orient=None) -> PerturbationBump:
    """Bump centred at an evaluation triple inside ``window`` and ``E = [box_lo, box_hi]``.

    Forbidden triples are the trajectory outside the window plus ``avoid``.
    Widths are the inf-norm clearance (in data-scaled coordinates) divided by
    ``inflation``.  ``orient(bump)`` returns a pairing whose sign fixes the
    bump's sign.
    """
    grid = traj.grid
    d = grid.dim
    lo, hi = np.asarray(box_lo, dtype=float), np.asarray(box_hi, dtype=float)
    if lo.shape != (2 * d + 1,) or hi.shape != lo.shape or np.any(hi <= lo):
        raise ValueError("E must be a nonempty box in (x, u, p) space")
    Z = evaluation_triples(grid, traj.states)
    n_t, N, D = Z.shape
    X = grid.nodes[None, :, :]
    T = traj.times[:, None]
    in_u = window.contains(np.broadcast_to(X, (n_t, N, d)), np.broadcast_to(T, (n_t, N)), strict=True)
    in_e = np.all((Z > lo) & (Z < hi), axis=-1)
    cand = in_u & in_e
    if not cand.any():
        raise NoGoodPoint("no sampled evaluation triple lies inside both the window and E")
    flat = Z.reshape(-1, D)
    forb = [flat[~in_u.ravel()]] + [_avoid_triples(grid, a) for a in avoid]
    forb = np.vstack([a for a in forb if len(a)]) if any(len(a) for a in forb) else np.empty((0, D))
    scale = np.ptp(flat, axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    cz = Z[cand]
    if len(forb):
        clear, _ = cKDTree(forb / scale).query(cz / scale, p=np.inf)
    else:
        clear = np.full(len(cz), np.inf)
    # room left inside E and inside the physical domain
    room = np.minimum(cz - lo, hi - cz) / scale
    dom_lo = np.array([a for a, _ in grid.domain.extents])
    dom_hi = np.array([b for _, b in grid.domain.extents])
    room[:, :d] = np.minimum(room[:, :d], np.minimum(cz[:, :d] - dom_lo, dom_hi - cz[:, :d]) / scale[:d])
    width = np.minimum(np.minimum(clear / inflation * 0.999, room.min(axis=1) * 0.999), max_width)
    k = int(np.argmax(width))
    if not width[k] > 1e-12:
        raise NoGoodPoint("every admissible triple is within the avoid set")
    center = cz[k]
    widths = width[k] * scale
    bump = PerturbationBump(center, widths, amplitude, 1, lo, hi, forb if len(forb) else None, inflation)
    vals = composed_values(bump, grid, traj.states)
    if np.any(vals[~in_u] != 0):
        raise NoGoodPoint("composed support leaks outside the window")
    if orient is not None and orient(bump) < 0:
        bump = PerturbationBump(center, widths, amplitude, -1, lo, hi, bump.avoid, inflation)
    return bump


# --- flow derivative and pairings ------------------------------------------

def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    h = np.diff(times)
    w = np.zeros(times.size)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _require_steps(traj: TrajectorySegment, coeffs: CoefficientField, m: float) -> np.ndarray:
    pts = coeffs.step_points(traj.t0, traj.t0 + m)
    if pts.size > traj.times.size or not np.allclose(traj.times[: pts.size], pts, rtol=0, atol=1e-9):
        raise ValueError("trajectory must store every step (stride 1) on [t0, t0+m]")
    return pts


def flow_derivative_wrt_f(f: NonlinearField, u0: np.ndarray, m: float, h, *, grid: Grid,
                          dt: float = 1e-3, scheme: str = "cn", traj: TrajectorySegment | None = None,
                          coeffs: CoefficientField | None = None) -> np.ndarray:
    """int_0^m U(m, s) h(., u(s), grad u(s)) ds by the trapezoid rule on the steps."""
    if traj is None:
        traj = integrate(f, grid, u0, m, dt, scheme=scheme)
    coeffs = coeffs or linearize_along(f, traj)
    pts = _require_steps(traj, coeffs, m)
    H = composed_values(h, grid, traj.states[: pts.size])
    w = _trapezoid_weights(pts)
    acc = w[0] * H[0]
    st = coeffs.stepper()
    for k in range(pts.size - 1):
        acc = st.forward(acc, pts[k], pts[k + 1] - pts[k]) + w[k + 1] * H[k + 1]
    return acc


def pairing_integral(bump, traj: TrajectorySegment, coeffs: CoefficientField, psi_m: np.ndarray,
                     m: float) -> float:
    """int_0^m <psi(s), h(., u(s), grad u(s))> ds with psi(s) = U(m, s)^* psi_m."""
    grid = traj.grid
    pts = _require_steps(traj, coeffs, m)
    ts, psi = propagate_adjoint(coeffs, psi_m, traj.t0 + m, traj.t0, history=True)
    H = composed_values(bump, grid, traj.states[: pts.size])
    w = _trapezoid_weights(ts)
    return float(np.sum(w * grid.inner(psi.T, H.T)))


@dataclass(eq=False)
class PairingExperiment:
    trajectory: TrajectorySegment
    psi: np.ndarray
    bump: PerturbationBump
    window: tuple
    integral_value: float
    derivative_value: float  # <psi, D(h)>
    fd_value: float  # <psi, centred difference of the flow>
    eps: float
    derivative: np.ndarray = field(repr=False)
    fd_derivative: np.ndarray = field(repr=False)

    @property
    def duality_error(self) -> float:
        return abs(self.integral_value - self.derivative_value) / max(abs(self.integral_value), 1e-300)

    @property
    def fd_error(self) -> float:
        g = self.trajectory.grid
        return float(g.norm(self.fd_derivative - self.derivative) / max(g.norm(self.derivative), 1e-300))

    def to_json(self) -> dict:
        return {
            "integral_value": self.integral_value,
            "derivative_value": self.derivative_value,
            "fd_value": self.fd_value,
            "eps": self.eps,
            "time_window": list(self.window),
            "duality_relative_error": self.duality_error,
            "fd_relative_error": self.fd_error,
            "bump_center": self.bump.center.tolist(),
            "bump_widths": self.bump.widths.tolist(),
            "bump_sign": self.bump.sign,
        }


def flow_difference(f: NonlinearField, grid: Grid, u0, m: float, h, eps: float, *, dt: float,
                    scheme: str = "cn") -> np.ndarray:
    """Centred difference (S_{f+eps h}(m) u0 - S_{f-eps h}(m) u0) / (2 eps)."""
    up = integrate(compose_perturbed(f, h, eps), grid, u0, m, dt, scheme=scheme).final
    dn = integrate(compose_perturbed(f, h, -eps), grid, u0, m, dt, scheme=scheme).final
    return (up - dn) / (2 * eps)


def run_pairing_experiment(f: NonlinearField, grid: Grid, u0, m: float, bump, psi_m, *,
                           dt: float = 1e-3, scheme: str = "cn", eps: float = 1e-4,
                           traj: TrajectorySegment | None = None) -> PairingExperiment:
    traj = traj or integrate(f, grid, u0, m, dt, scheme=scheme)
    coeffs = linearize_along(f, traj)
    D = flow_derivative_wrt_f(f, u0, m, bump, grid=grid, traj=traj, coeffs=coeffs)
    I = pairing_integral(bump, traj, coeffs, psi_m, m)
    fd = flow_difference(f, grid, u0, m, bump, eps, dt=dt, scheme=scheme)
    return PairingExperiment(traj, np.asarray(psi_m, dtype=float), bump, (traj.t0, traj.t0 + m), I,
                             float(grid.inner(psi_m, D)), float(grid.inner(psi_m, fd)), eps, D, fd)


def restoration_experiment(f: NonlinearField, grid: Grid, u0, m: float, bump, normals: np.ndarray, *,
                           eps: float = 1e-3, dt: float = 1e-3, scheme: str = "cn",
                           noise_floor: float | None = None) -> dict:
    """Shift of <psi_i, u(m)> under f -> f +- eps*h against the first-order prediction.

    ``normals`` holds target normal vectors as columns.  Entries below the
    noise floor are left out of the sign count.
    """
    normals = np.atleast_2d(np.asarray(normals, dtype=float).T).T
    traj = integrate(f, grid, u0, m, dt, scheme=scheme)
    D = flow_derivative_wrt_f(f, u0, m, bump, grid=grid, traj=traj)
    base = traj.final
    pred, meas = [], []
    for sgn in (1.0, -1.0):
        u = integrate(compose_perturbed(f, bump, sgn * eps), grid, u0, m, dt, scheme=scheme).final
        meas.append(grid.inner(normals, u - base))
        pred.append(sgn * eps * grid.inner(normals, D))
    meas, pred = np.ravel(meas), np.ravel(pred)
    floor = noise_floor if noise_floor is not None else 1e3 * np.finfo(float).eps * max(float(grid.norm(base)), 1.0)
    use = np.abs(pred) > floor
    agree = np.sign(meas[use]) == np.sign(pred[use])
    ratio = meas[use] / pred[use] if use.any() else np.empty(0)
    return {
        "eps": eps,
        "measured": meas.tolist(),
        "predicted": pred.tolist(),
        "noise_floor": floor,
        "n_used": int(use.sum()),
        "sign_agreement": float(agree.mean()) if use.any() else float("nan"),
        "max_ratio_deviation": float(np.max(np.abs(ratio - 1))) if ratio.size else float("nan"),
    }


# --- colinear-avoiding construction ----------------------------------------

def _orbit_time_derivative(orbit: PeriodicOrbit, f: NonlinearField | None) -> np.ndarray:
    st = orbit.phase_states()
    if f is not None:
        return np.array([vector_field(f, orbit.grid, u) for u in st])
    h = orbit.period / len(st)
    return (np.roll(st, -1, axis=0) - np.roll(st, 1, axis=0)) / (2 * h)


def _sample_V(orbit: PeriodicOrbit, V) -> np.ndarray:
    grid = orbit.grid
    n = len(orbit.phase_states())
    if callable(V):
        ts = orbit.samples.times[:n]
        out = np.array([np.asarray(V(grid.nodes, t)) for t in ts])
    else:
        out = np.asarray(V)
        if out.ndim == 1:
            out = np.broadcast_to(out, (n, grid.size, out.size))
    if out.shape != (n, grid.size, 1 + grid.dim):
        raise ValueError(f"V must have shape (n_t, N, {1 + grid.dim})")
    return out


def colinearity_defect(orbit: PeriodicOrbit, V, f: NonlinearField | None = None) -> np.ndarray:
    """|sin| of the angle between V and (p_t, grad p_t) at every sample.

    Zero everywhere means V is colinear to the orbit's time derivative.
    Complex V is split: returns the real-part and imaginary-part defects
    stacked along a leading axis.
    """
    Vs = _sample_V(orbit, V)
    if np.iscomplexobj(Vs):
        return np.stack([colinearity_defect(orbit, Vs.real, f), colinearity_defect(orbit, Vs.imag, f)])
    grid = orbit.grid
    pt = _orbit_time_derivative(orbit, f)
    Pt = evaluation_triples(grid, pt)[..., grid.dim:]
    a, b = Pt, Vs
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    dot = np.einsum("...i,...i->...", a, b)
    cos2 = np.where((na > 0) & (nb > 0), (dot / np.maximum(na * nb, 1e-300)) ** 2, 1.0)
    return np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0))


@dataclass(eq=False)
class ColinearAvoidingPerturbation:
    """g = (chi * tau) o h^{-1} near a base point of a 1D orbit.

    h(x, t, tau) = (x, P(x, t) + tau V(x, t)) with P = (p, p_x); chi is a
    tensor mollifier on the box |x-x0| < rx, |t-t0| < rt, |tau| < rtau.
    """

    base_point: tuple
    radii: tuple
    period: float
    splines: dict = field(repr=False)
    x_period: float | None = None
    certificate_i: float = math.nan
    certificate_ii: float = math.nan
    condition: float = math.nan
    independence: float = math.nan
    shrink_steps: int = 0
    newton_tol: float = 1e-13
    n_starts: int = 5

    def _ev(self, key, x, t, dx=0, dy=0):
        return self.splines[key].ev(x, t, dx=dx, dy=dy)

    def _h(self, x, t, tau):
        return np.stack([self._ev("p", x, t) + tau * self._ev("v0", x, t),
                         self._ev("q", x, t) + tau * self._ev("v1", x, t)], axis=-1)

    def _jac_t_tau(self, x, t, tau):
        J = np.empty(np.shape(t) + (2, 2))
        J[..., 0, 0] = self._ev("p", x, t, dy=1) + tau * self._ev("v0", x, t, dy=1)
        J[..., 1, 0] = self._ev("q", x, t, dy=1) + tau * self._ev("v1", x, t, dy=1)
        J[..., 0, 1] = self._ev("v0", x, t)
        J[..., 1, 1] = self._ev("v1", x, t)
        return J

    def _jac_x(self, x, t, tau):
        return np.stack([self._ev("p", x, t, dx=1) + tau * self._ev("v0", x, t, dx=1),
                         self._ev("q", x, t, dx=1) + tau * self._ev("v1", x, t, dx=1)], axis=-1)

    def jacobian(self, x, t, tau) -> np.ndarray:
        x, t, tau = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, t, tau)))
        J = np.zeros(x.shape + (3, 3))
        J[..., 0, 0] = 1.0
        J[..., 1:, 0] = self._jac_x(x, t, tau)
        J[..., 1:, 1:] = self._jac_t_tau(x, t, tau)
        return J

    def _local_x(self, x):
        x0 = self.base_point[0]
        if self.x_period is None:
            return x
        L = self.x_period
        return x0 + (x - x0 + L / 2) % L - L / 2

    def _chi(self, x, t, tau):
        x0, t0 = self.base_point
        rx, rt, rtau = self.radii
        s = np.stack([(x - x0) / rx, (t - t0) / rt, tau / rtau], axis=-1)
        m, mp = mollifier(s), mollifier_prime(s)
        chi = np.prod(m, axis=-1)
        d = np.stack([mp[..., 0] * m[..., 1] * m[..., 2] / rx, m[..., 0] * mp[..., 1] * m[..., 2] / rt,
                      m[..., 0] * m[..., 1] * mp[..., 2] / rtau], axis=-1)
        return chi, d

    def invert(self, x, up):
        """Roots (t, tau) of h(x, t, tau) = (x, up) in the box, by multistart Newton.

        Returns ``(t, tau, found)``; raises NonConvergence when two distinct
        roots share a box, i.e. the local map is not injective there.
        """
        x = self._local_x(np.asarray(x, dtype=float).ravel())
        up = np.asarray(up, dtype=float).reshape(-1, 2)
        K, S = x.size, self.n_starts
        x0, t0 = self.base_point
        rx, rt, rtau = self.radii
        xs = np.repeat(x, S)
        ups = np.repeat(up, S, axis=0)
        y = np.column_stack([np.tile(t0 + rt * np.linspace(-0.9, 0.9, S), K), np.zeros(K * S)])
        tol = self.newton_tol * np.maximum(1.0, np.max(np.abs(ups), axis=1))
        act = np.arange(K * S)
        for _ in range(40):
            xa, ua, ya = xs[act], ups[act], y[act]
            r = self._h(xa, ya[:, 0], ya[:, 1]) - ua
            nr = np.linalg.norm(r, axis=1)
            keep = nr > tol[act]
            act, xa, ua, ya, r, nr = act[keep], xa[keep], ua[keep], ya[keep], r[keep], nr[keep]
            if act.size == 0:
                break
            J = self._jac_t_tau(xa, ya[:, 0], ya[:, 1])
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            sd = np.where(np.abs(det) > 1e-300, det, np.inf)
            step = -np.column_stack([J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1],
                                     -J[:, 1, 0] * r[:, 0] + J[:, 0, 0] * r[:, 1]]) / sd[:, None]
            yn = ya + step
            todo = np.arange(act.size)
            lam = 1.0
            for _ in range(14):
                nn = np.linalg.norm(self._h(xa[todo], yn[todo, 0], yn[todo, 1]) - ua[todo], axis=1)
                todo = todo[nn >= nr[todo]]
                if todo.size == 0:
                    break
                lam *= 0.5
                yn[todo] = ya[todo] + lam * step[todo]
            y[act] = yn
        res = np.linalg.norm(self._h(xs, y[:, 0], y[:, 1]) - ups, axis=1)
        good = (res <= tol) & (np.abs(y[:, 0] - t0) < rt) & (np.abs(y[:, 1]) < rtau) & (np.abs(xs - x0) < rx)
        y = y.reshape(K, S, 2)
        good = good.reshape(K, S)
        found = good.any(axis=1)
        yy = np.where(good[..., None], y, np.nan)
        spread = np.zeros((K, 2))
        if found.any():
            spread[found] = np.nanmax(yy[found], axis=1) - np.nanmin(yy[found], axis=1)
        if np.any(spread.max(axis=1) > 1e-8):
            raise NonConvergence("local map is not injective on the neighbourhood")
        first = np.argmax(good, axis=1)
        root = y[np.arange(K), first]
        return root[:, 0], root[:, 1], found

    def value_and_gradient(self, x, up):
        """g and its (x, u, p) gradient at the flattened points."""
        x = self._local_x(np.asarray(x, dtype=float).ravel())
        t, tau, found = self.invert(x, up)
        g = np.zeros(x.size)
        grad = np.zeros((x.size, 3))
        if found.any():
            xf, tf, sf = x[found], t[found], tau[found]
            chi, dchi = self._chi(xf, tf, sf)
            g[found] = chi * sf
            dy = np.column_stack([dchi[:, 0] * sf, dchi[:, 1] * sf, dchi[:, 2] * sf + chi])
            JT = np.swapaxes(self.jacobian(xf, tf, sf), -1, -2)
            grad[found] = np.linalg.solve(JT, dy[..., None])[..., 0]
        return g, grad

    def _flat(self, x, u, p):
        x, u, p = np.asarray(x, float), np.asarray(u, float), np.asarray(p, float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape, p.shape[:-1])
        xs = np.broadcast_to(x, shape + (1,)).reshape(-1)
        up = np.column_stack([np.broadcast_to(u, shape).reshape(-1), np.broadcast_to(p, shape + (1,)).reshape(-1)])
        return shape, xs, up

    def value(self, x, u, p):
        shape, xs, up = self._flat(x, u, p)
        return self.value_and_gradient(xs, up)[0].reshape(shape)

    def gradient(self, x, u, p) -> np.ndarray:
        """(..., 3) gradient with respect to (x, u, p)."""
        shape, xs, up = self._flat(x, u, p)
        return self.value_and_gradient(xs, up)[1].reshape(shape + (3,))

    def du(self, x, u, p):
        return self.gradient(x, u, p)[..., 1]

    def dp(self, x, u, p):
        return self.gradient(x, u, p)[..., 2:]

    def as_field(self) -> NonlinearField:
        return NonlinearField(self.value, self.du, self.dp, "colinear_avoiding")

    def to_json(self) -> dict:
        return {
            "base_point": list(map(float, self.base_point)),
            "radii": list(map(float, self.radii)),
            "certificate_i": self.certificate_i,
            "certificate_ii": self.certificate_ii,
            "condition": self.condition,
            "independence": self.independence,
            "shrink_steps": self.shrink_steps,
        }


def _patch(grid: Grid, orbit: PeriodicOrbit, fields: dict, j0: int, i0: int, nx: int, nt: int):
    """Local (x, t) patch around node j0 and sample i0, unwrapped across periodic seams."""
    n_t = len(orbit.phase_states())
    ax = grid.axes[0]
    N = grid.size
    xs_all = grid.nodes[:, 0]
    if ax.bc == "periodic":
        js = np.arange(j0 - nx, j0 + nx + 1)
        xs = xs_all[js % N] + (ax.hi - ax.lo) * np.floor_divide(js, N)
        js = js % N
    else:
        js = np.arange(max(0, j0 - nx), min(N, j0 + nx + 1))
        xs = xs_all[js]
    h = orbit.period / n_t
    ii = np.arange(i0 - nt, i0 + nt + 1)
    ts = orbit.samples.times[0] + ii * h
    ii = ii % n_t
    return xs, ts, {k: v[np.ix_(ii, js)].T for k, v in fields.items()}


def _certificates(g: ColinearAvoidingPerturbation, grid: Grid, orbit: PeriodicOrbit, Z, Vs):
    """(max |g| on the sampled orbit, quadrature of grad g . V over the orbit)."""
    x0, t0 = g.base_point
    rx, rt, rtau = g.radii
    xs = grid.nodes[:, 0]
    dist = np.abs(g._local_x(xs) - x0)
    near = np.nonzero(dist < rx)[0]
    n_t = Z.shape[0]
    h = orbit.period / n_t
    lag = np.abs((np.arange(n_t) * h - (t0 - orbit.samples.times[0]) + orbit.period / 2) % orbit.period
                 - orbit.period / 2)
    seg = lag <= rt + h
    vmax = float(np.max(np.linalg.norm(Vs, axis=-1)))
    ptmax = float(np.max(np.linalg.norm(np.diff(Z[..., 1:], axis=0), axis=-1))) / h
    reach = 1.5 * (rtau * vmax + h * ptmax)
    ii, jj = [], []
    for j in near:
        curve = Z[seg, j, 1:]
        gap = np.min(np.linalg.norm(Z[:, j, None, 1:] - curve[None], axis=-1), axis=1)
        sel = np.nonzero(gap <= reach)[0]
        ii.append(sel)
        jj.append(np.full(sel.size, j))
    if not ii:
        return 0.0, 0.0
    ii, jj = np.concatenate(ii), np.concatenate(jj)
    val, grad = g.value_and_gradient(xs[jj], Z[ii, jj, 1:])
    c1 = float(np.max(np.abs(val))) if val.size else 0.0
    c2 = float(np.sum(grid.weights[jj] * h * np.einsum("ki,ki->k", grad[:, 1:], Vs[ii, jj])))
    return c1, c2


def colinear_avoiding_perturbation(orbit: PeriodicOrbit, V, f: NonlinearField | None = None, *,
                                   independence_tol: float = 1e-3, radii=None, max_shrink: int = 8,
                                   cond_limit: float = 1e6, cert_tol: float = 1e-10,
                                   base_point=None) -> ColinearAvoidingPerturbation:
    """Perturbation g vanishing on the orbit's evaluation curve with a nonzero V-pairing.

    Certificate (i) is max |g(x, p, p_x)| over the sampled orbit; certificate
    (ii) is the quadrature of (D_u g, D_p g) . V over the sampled orbit.
    One space dimension only.
    """
    grid = orbit.grid
    if grid.dim != 1:
        raise ValueError("the colinear-avoiding construction is implemented for one space dimension")
    Vs = _sample_V(orbit, V)
    if np.iscomplexobj(Vs):
        raise ValueError("split complex V into real and imaginary parts first (see colinearity_defect)")
    defect = colinearity_defect(orbit, Vs, f)
    if not np.max(defect) > independence_tol:
        raise ColinearEverywhere(f"V is colinear to (p_t, grad p_t) everywhere (max defect {np.max(defect):.3g})")
    st = orbit.phase_states()
    n_t, N = st.shape
    if base_point is None:
        i0, j0 = np.unravel_index(int(np.argmax(defect)), defect.shape)
    else:
        j0 = grid.node_index([base_point[0]])
        i0 = int(np.argmin(np.abs(orbit.samples.times[:n_t] - base_point[1])))
    Z = evaluation_triples(grid, st)
    fields = {"p": Z[..., 1], "q": Z[..., 2], "v0": Vs[..., 0], "v1": Vs[..., 1]}
    ax = grid.axes[0]
    L = ax.hi - ax.lo
    periodic = ax.bc == "periodic"
    x0 = float(grid.nodes[j0, 0])
    t0 = float(orbit.samples.times[i0])
    scale = float(np.max(np.linalg.norm(Z[..., 1:], axis=-1)))
    rx, rt, rtau = radii if radii is not None else (0.1 * L, 0.1 * orbit.period, 0.1 * scale)
    dx, dtt = L / N, orbit.period / n_t
    for step in range(max_shrink + 1):
        nx = int(math.ceil(rx / dx)) + 6
        if not periodic:
            nx = min(nx, j0, N - 1 - j0)
        nt = min(int(math.ceil(rt / dtt)) + 6, n_t // 2 - 1)
        xs, ts, patch = _patch(grid, orbit, fields, j0, i0, nx, nt)
        spl = {k: RectBivariateSpline(xs, ts, v, kx=5, ky=5) for k, v in patch.items()}
        g = ColinearAvoidingPerturbation((x0, t0), (rx, rt, rtau), orbit.period, spl, L if periodic else None,
                                         independence=float(defect[i0, j0]), shrink_steps=step)
        s = np.linspace(-0.95, 0.95, 5)
        gx, gt, gs = np.meshgrid(x0 + rx * s, t0 + rt * s, rtau * s[::2], indexing="ij")
        g.condition = float(np.max(np.linalg.cond(g.jacobian(gx, gt, gs).reshape(-1, 3, 3))))
        ok = g.condition < cond_limit
        if ok:
            try:
                g.certificate_i, g.certificate_ii = _certificates(g, grid, orbit, Z, Vs)
            except NonConvergence:
                ok = False
            else:
                ok = g.certificate_i <= cert_tol and g.certificate_ii != 0.0
        if ok:
            return g
        log.info("shrinking colinear-avoiding neighbourhood (step %d, cond %.3g)", step, g.condition)
        rx, rt, rtau = rx / 2, rt / 2, rtau / 2
    raise NonConvergence("could not find a neighbourhood with a well-conditioned injective local map")
