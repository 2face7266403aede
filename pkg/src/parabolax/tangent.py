"""Linearised evolution U(t, s), its discrete adjoint, and the duality pairing.

The variational equation v_t = Lap v + a v + b . grad v is stepped with the
same IMEX tableau as the nonlinear flow.  The adjoint applies the exact
transpose of every forward step with respect to the quadrature inner
product, so <psi(t), v(t)> is constant up to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid
from .imex import SolverCache, Tableau, get_tableau
from .nonlinearity import NonlinearField
from .semiflow import TrajectorySegment

_EPS_T = 1e-9


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Samples of a(x, t) and b(x, t) at ``times``; linear in t in between.

    ``dt`` is the nominal step of the propagation grid ``times[0] + k*dt``.
    """

    grid: Grid
    times: np.ndarray
    a: np.ndarray  # (n_t, N)
    b: np.ndarray  # (n_t, d, N)
    dt: float
    scheme: str = "cn"
    source: str = "linearization"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n_t, N, d = len(self.times), self.grid.size, self.grid.dim
        if self.a.shape != (n_t, N) or self.b.shape != (n_t, d, N):
            raise ValueError("coefficient arrays do not match grid and times")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("coefficients must be finite")

    @property
    def window(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        ts = self.times
        if ts.size == 1:
            return self.a[0], self.b[0]
        i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, ts.size - 2))
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        w = min(max(w, 0.0), 1.0)
        if w == 0.0:
            return self.a[i], self.b[i]
        if w == 1.0:
            return self.a[i + 1], self.b[i + 1]
        return (1 - w) * self.a[i] + w * self.a[i + 1], (1 - w) * self.b[i] + w * self.b[i + 1]

    def check_window(self, s: float, t: float):
        lo, hi = self.window
        tol = _EPS_T * max(1.0, abs(hi - lo))
        if s > t + tol or s < lo - tol or t > hi + tol:
            raise ValueError(f"[{s}, {t}] is not an ordered sub-window of [{lo}, {hi}]")

    def step_points(self, s: float, t: float) -> np.ndarray:
        base, dt = float(self.times[0]), self.dt
        k0 = math.floor((s - base) / dt + _EPS_T) + 1
        k1 = math.ceil((t - base) / dt - _EPS_T) - 1
        inner = base + np.arange(k0, k1 + 1) * dt if k1 >= k0 else np.empty(0)
        inner = inner[(inner > s + _EPS_T * dt) & (inner < t - _EPS_T * dt)]
        return np.concatenate([[s], inner, [t]]) if t > s else np.array([s])

    def stepper(self) -> "TangentStepper":
        st = self._cache.get("stepper")
        if st is None:
            st = self._cache["stepper"] = TangentStepper(self)
        return st


def constant_coefficients(grid: Grid, a, b, t0: float, t1: float, dt: float,
                          scheme: str = "cn") -> CoefficientField:
    """Time-independent coefficients on [t0, t1]."""
    N, d = grid.size, grid.dim
    a = np.broadcast_to(np.asarray(a, dtype=float), (N,))
    b = np.broadcast_to(np.asarray(b, dtype=float), (d, N)) if np.ndim(b) else np.full((d, N), float(b))
    return CoefficientField(grid, np.array([t0, t1]), np.stack([a, a]), np.stack([b, b]),
                            dt, scheme, "constant")


def _states_gradient(grid: Grid, states: np.ndarray) -> np.ndarray:
    """(n_t, N, d) gradient of stacked states (n_t, N)."""
    return np.stack([(g @ states.T).T for g in grid.grads], axis=-1)


def linearize_along(f: NonlinearField, traj: TrajectorySegment) -> CoefficientField:
    grid = traj.grid
    U = traj.states
    P = _states_gradient(grid, U)
    X = grid.nodes[None, :, :]
    a = np.asarray(f.du(X, U, P), dtype=float).reshape(U.shape)
    b = np.moveaxis(np.asarray(f.dp(X, U, P), dtype=float).reshape(U.shape + (grid.dim,)), -1, 1)
    return CoefficientField(grid, traj.times.copy(), a, np.ascontiguousarray(b), traj.dt, traj.scheme,
                            "linearization")


def difference_coefficients(f: NonlinearField, traj1: TrajectorySegment, traj2: TrajectorySegment,
                            order: int = 8) -> CoefficientField:
    """theta-averaged partials between two trajectories (Gauss-Legendre in theta)."""
    if traj1.grid is not traj2.grid and traj1.grid.size != traj2.grid.size:
        raise ValueError("trajectories live on different grids")
    if traj1.times.shape != traj2.times.shape or not np.allclose(traj1.times, traj2.times, rtol=0, atol=1e-12):
        raise ValueError("trajectories do not share a time window")
    grid = traj1.grid
    nodes, wts = np.polynomial.legendre.leggauss(order)
    th, wts = 0.5 * (nodes + 1), 0.5 * wts
    U1, U2 = traj1.states, traj2.states
    P1, P2 = _states_gradient(grid, U1), _states_gradient(grid, U2)
    X = grid.nodes[None, :, :]
    a = np.zeros_like(U1)
    b = np.zeros(U1.shape + (grid.dim,))
    for q, w in zip(th, wts):
        U, P = q * U2 + (1 - q) * U1, q * P2 + (1 - q) * P1
        a += w * np.asarray(f.du(X, U, P)).reshape(U1.shape)
        b += w * np.asarray(f.dp(X, U, P)).reshape(b.shape)
    return CoefficientField(grid, traj1.times.copy(), a, np.ascontiguousarray(np.moveaxis(b, -1, 1)),
                            traj1.dt, traj1.scheme, "difference")


def _col(c: np.ndarray, y: np.ndarray) -> np.ndarray:
    return c if y.ndim == 1 else c[:, None]


class TangentStepper:
    def __init__(self, coeffs: CoefficientField, scheme: str | Tableau | None = None):
        self.c = coeffs
        self.grid = coeffs.grid
        self.tab = get_tableau(scheme or coeffs.scheme) if not isinstance(scheme, Tableau) else scheme
        self.L = coeffs.grid.lap.matrix
        self.LT = self.L.T
        self.G = [g.matrix for g in coeffs.grid.grads]
        self.GT = [g.T for g in self.G]
        self.solvers = SolverCache(self.L)

    def _A(self, ab, y):
        a, b = ab
        out = _col(a, y) * y
        for k, g in enumerate(self.G):
            out = out + _col(b[k], y) * (g @ y)
        return out

    def _AT(self, ab, lam):
        a, b = ab
        out = _col(a, lam) * lam
        for k, gt in enumerate(self.GT):
            out = out + gt @ (_col(b[k], lam) * lam)
        return out

    def forward(self, v: np.ndarray, t: float, h: float) -> np.ndarray:
        tab = self.tab
        s = tab.stages
        ly, ay = [None] * s, [None] * s
        for i in range(s):
            rhs = v.copy()
            for j in range(i):
                if tab.ai[i, j]:
                    rhs += (h * tab.ai[i, j]) * ly[j]
                if tab.ae[i, j]:
                    rhs += (h * tab.ae[i, j]) * ay[j]
            y = self.solvers.get(h * tab.ai[i, i]).solve(rhs) if tab.ai[i, i] else rhs
            ly[i] = self.L @ y
            ay[i] = self._A(self.c.at(t + tab.c[i] * h), y)
        out = v.copy()
        for i in range(s):
            if tab.bi[i]:
                out += (h * tab.bi[i]) * ly[i]
            if tab.be[i]:
                out += (h * tab.be[i]) * ay[i]
        return out

    def backward(self, lam: np.ndarray, t: float, h: float) -> np.ndarray:
        """Euclidean transpose of ``forward(., t, h)``."""
        tab = self.tab
        s = tab.stages
        ab = [self.c.at(t + tab.c[i] * h) for i in range(s)]
        lt = self.LT @ lam
        ybar = [h * tab.bi[j] * lt + h * tab.be[j] * self._AT(ab[j], lam) for j in range(s)]
        vbar = lam.copy()
        for i in range(s - 1, -1, -1):
            g = tab.ai[i, i]
            rbar = self.solvers.get(h * g).solve(ybar[i], transpose=True) if g else ybar[i]
            vbar += rbar
            if i:
                lr = self.LT @ rbar
                for j in range(i):
                    if tab.ai[i, j] or tab.ae[i, j]:
                        ybar[j] = ybar[j] + h * tab.ai[i, j] * lr + h * tab.ae[i, j] * self._AT(ab[j], rbar)
        return vbar


def propagate(coeffs: CoefficientField, v_s: np.ndarray, s: float, t: float,
              history: bool = False):
    """U(t, s) v_s; with ``history`` returns (times, states) at every step point."""
    coeffs.check_window(s, t)
    v = coeffs.grid.check_state(v_s).astype(float).copy()
    pts = coeffs.step_points(s, t)
    st = coeffs.stepper()
    hist = [v.copy()] if history else None
    for k in range(pts.size - 1):
        v = st.forward(v, pts[k], pts[k + 1] - pts[k])
        if history:
            hist.append(v.copy())
    return (pts, np.array(hist)) if history else v


def propagate_adjoint(coeffs: CoefficientField, psi_T: np.ndarray, T: float, s: float,
                      history: bool = False):
    """U(T, s)^* psi_T in the weighted inner product.

    With ``history`` returns (times ascending, states) at every step point.
    """
    coeffs.check_window(s, T)
    w = coeffs.grid.weights
    psi = coeffs.grid.check_state(psi_T).astype(float)
    lam = _col(w, psi) * psi
    pts = coeffs.step_points(s, T)
    st = coeffs.stepper()
    hist = [lam / _col(w, lam)] if history else None
    for k in range(pts.size - 1, 0, -1):
        lam = st.backward(lam, pts[k - 1], pts[k] - pts[k - 1])
        if history:
            hist.append(lam / _col(w, lam))
    out = lam / _col(w, lam)
    if history:
        return pts, np.array(hist[::-1])
    return out


def duality_defect(coeffs: CoefficientField, v_s: np.ndarray, psi_T: np.ndarray, s: float, T: float,
                   adjoint_coeffs: CoefficientField | None = None, floor: float = 1e-300) -> float:
    """max_t |<psi(t), v(t)> - <psi_T, v(T)>| / (||psi_T|| ||v(T)|| + floor).

    ``adjoint_coeffs`` lets a test run the adjoint with different coefficients.
    """
    grid = coeffs.grid
    _, vs = propagate(coeffs, v_s, s, T, history=True)
    _, ps = propagate_adjoint(adjoint_coeffs or coeffs, psi_T, T, s, history=True)
    ref = grid.inner(psi_T, vs[-1])
    pair = np.array([grid.inner(p, v) for p, v in zip(ps, vs)])
    den = float(grid.norm(psi_T) * grid.norm(vs[-1])) + floor
    return float(np.max(np.abs(pair - ref)) / den)


def continuous_adjoint_residual(coeffs: CoefficientField, times: np.ndarray, states: np.ndarray) -> float:
    """Relative residual of psi_s + Lap psi + a psi - div(b psi) on a history."""
    grid = coeffs.grid
    if len(times) < 3:
        return float("nan")
    dpsi = np.gradient(states, times, axis=0)
    num = den = 0.0
    for k in range(1, len(times) - 1):
        a, b = coeffs.at(times[k])
        psi = states[k]
        div = sum(g @ (b[i] * psi) for i, g in enumerate(grid.grads))
        r = dpsi[k] + grid.lap @ psi + a * psi - div
        num = max(num, float(grid.norm(r)))
        den = max(den, float(grid.norm(grid.lap @ psi)), float(grid.norm(dpsi[k])))
    return num / max(den, 1e-300)
