"""Time integration of u_t = Lap u + f(x, u, grad u)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUp, NonConvergence
from .grid import Grid
from .imex import SolverCache, Tableau, get_tableau
from .nonlinearity import NonlinearField

DEFAULT_SCHEME = "cn"
BLOWUP_THRESHOLD = 1e6
SOLVER_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    grid: Grid
    times: np.ndarray
    states: np.ndarray  # (n_times, N)
    step_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or s.ndim != 2 or s.shape[0] != t.size or s.shape[1] != self.grid.size:
            raise ValueError("times/states shape mismatch")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def dt(self) -> float:
        return float(self.step_meta.get("dt", np.min(np.diff(self.times)) if self.times.size > 1 else 1.0))

    @property
    def scheme(self) -> str:
        return str(self.step_meta.get("scheme", DEFAULT_SCHEME))

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored states."""
        i = int(np.clip(np.searchsorted(self.times, t) - 1, 0, self.times.size - 2)) if self.times.size > 1 else 0
        if self.times.size == 1:
            return self.states[0]
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.states[i] + w * self.states[i + 1]

    def truncated(self, index: int) -> "TrajectorySegment":
        return TrajectorySegment(self.grid, self.times[: index + 1], self.states[: index + 1], dict(self.step_meta))


def nodal_gradient(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Gradient with the component axis last: shape ``(N, d)`` or ``(..., N, d)``."""
    return np.stack([g @ u for g in grid.grads], axis=-1)


def nonlinear_term(f: NonlinearField, grid: Grid, u: np.ndarray) -> np.ndarray:
    return f.value(grid.nodes, u, nodal_gradient(grid, u))


def vector_field(f: NonlinearField, grid: Grid, u: np.ndarray) -> np.ndarray:
    """Semi-discrete right-hand side Lap u + f(x, u, grad u)."""
    return grid.lap @ u + nonlinear_term(f, grid, u)


class Stepper:
    """One IMEX Runge-Kutta step for the nonlinear equation."""

    def __init__(self, f: NonlinearField, grid: Grid, scheme: str | Tableau = DEFAULT_SCHEME,
                 solver_tol: float = SOLVER_TOL):
        self.f = f
        self.grid = grid
        self.tab = get_tableau(scheme) if isinstance(scheme, str) else scheme
        self.solvers = SolverCache(grid.lap.matrix)
        self.solver_tol = solver_tol
        self.max_residual = 0.0

    def step(self, u: np.ndarray, t: float, h: float) -> np.ndarray:
        tab, L = self.tab, self.grid.lap
        s = tab.stages
        ly: list = [None] * s
        nl: list = [None] * s
        for i in range(s):
            rhs = u.copy()
            for j in range(i):
                if tab.ai[i, j]:
                    rhs += (h * tab.ai[i, j]) * ly[j]
                if tab.ae[i, j]:
                    rhs += (h * tab.ae[i, j]) * nl[j]
            gamma = tab.ai[i, i]
            if gamma:
                y = self.solvers.get(h * gamma).solve(rhs)
                ly[i] = L @ y
                res = np.max(np.abs(y - h * gamma * ly[i] - rhs)) / max(np.max(np.abs(rhs)), 1e-300)
                if not np.isfinite(res) or res > self.solver_tol:
                    raise NonConvergence(f"implicit stage residual {res:.3g} exceeds {self.solver_tol:g}")
                self.max_residual = max(self.max_residual, float(res))
            else:
                y = rhs
                ly[i] = L @ y
            nl[i] = nonlinear_term(self.f, self.grid, y)
        out = u.copy()
        for i in range(s):
            if tab.bi[i]:
                out += (h * tab.bi[i]) * ly[i]
            if tab.be[i]:
                out += (h * tab.be[i]) * nl[i]
        return out


def step_count(T: float, dt: float) -> int:
    return max(1, int(math.ceil(T / dt - 1e-9)))


def integrate(f: NonlinearField, grid: Grid, u0: np.ndarray, T: float, dt: float, *,
              scheme: str = DEFAULT_SCHEME, stride: int = 1, t0: float = 0.0,
              blowup_threshold: float = BLOWUP_THRESHOLD, solver_tol: float = SOLVER_TOL) -> TrajectorySegment:
    """Integrate on [t0, t0+T] with ``ceil(T/dt)`` equal steps.

    Stores every ``stride``-th state plus the final one.
    """
    if not (T > 0 and dt > 0):
        raise ValueError("need T > 0 and dt > 0")
    if dt > T * (1 + 1e-12):
        raise ValueError("dt must not exceed T")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    u = grid.check_state(u0).astype(float).copy()
    n = step_count(T, dt)
    h = T / n
    stepper = Stepper(f, grid, scheme, solver_tol)
    times, states = [t0], [u.copy()]
    t = t0
    meta = {"scheme": stepper.tab.name, "dt": h, "n_steps": n, "stride": stride,
            "solver_tol": solver_tol, "blowup_threshold": blowup_threshold}
    for k in range(1, n + 1):
        u_new = stepper.step(u, t, h)
        norm = float(np.max(np.abs(u_new))) if np.all(np.isfinite(u_new)) else math.inf
        if norm > blowup_threshold:
            partial = TrajectorySegment(grid, np.array(times + ([t] if times[-1] != t else [])),
                                        np.array(states + ([u.copy()] if times[-1] != t else [])),
                                        dict(meta, blowup=True))
            raise BlowUp(t, norm, partial)
        u = u_new
        t = t0 + k * h
        if k % stride == 0 or k == n:
            times.append(t)
            states.append(u.copy())
    meta["max_step_residual"] = stepper.max_residual
    return TrajectorySegment(grid, np.array(times), np.array(states), meta)


def evaluation_map(grid: Grid, state: np.ndarray, x0) -> tuple[np.ndarray, float, np.ndarray]:
    """(x0, u(x0), grad u(x0)) at a grid node."""
    j = grid.node_index(x0)
    u = grid.check_state(state)
    p = np.array([g @ u for g in grid.grads])[:, j]
    return grid.nodes[j].copy(), float(u[j]), p


def semigroup_defect(f: NonlinearField, grid: Grid, u0: np.ndarray, t: float, s: float, dt: float,
                     **kw) -> float:
    """||S(t+s)u0 - S(t)S(s)u0|| / ||S(t+s)u0|| in the weighted norm."""
    if not (t > 0 and s > 0):
        raise ValueError("need t, s > 0")
    whole = integrate(f, grid, u0, t + s, min(dt, t + s), **kw).final
    first = integrate(f, grid, u0, s, min(dt, s), **kw).final
    second = integrate(f, grid, first, t, min(dt, t), **kw).final
    return float(grid.norm(whole - second) / max(grid.norm(whole), 1e-300))
