"""Equilibria, periodic orbits, spectra and continuation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContinuationLost, NoConvergence, NumericalFailure, ReturnNotFound, SingularJacobian
from .grid import Grid
from .nonlinearity import NonlinearField
from .semiflow import TrajectorySegment, integrate, nodal_gradient, vector_field
from .tangent import linearize_along, propagate

log = logging.getLogger(__name__)

UNIT_MARGIN = 1e-4
EQ_TOL = 1e-10
ORBIT_TOL = 1e-6


@dataclass(eq=False)
class SpectrumReport:
    kind: str  # "equilibrium" | "periodic"
    multipliers: np.ndarray  # reported (top-k) multipliers
    all_multipliers: np.ndarray = field(repr=False)
    morse_index: int = 0
    flags: dict = field(default_factory=dict)
    gap: float = np.inf
    tau_ref: float | None = None
    eigenvalues: np.ndarray | None = None
    all_eigenvalues: np.ndarray | None = field(default=None, repr=False)
    trivial_multiplier_residual: float | None = None
    trivial_index: int | None = None  # position in all_multipliers
    vectors: np.ndarray | None = field(default=None, repr=False)  # right eigvecs, columns
    margin: float = UNIT_MARGIN

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "multipliers": [[float(m.real), float(m.imag)] for m in self.multipliers],
            "morse_index": int(self.morse_index),
            "flags": {k: bool(v) for k, v in sorted(self.flags.items())},
            "gap": _finite(self.gap),
            "margin": self.margin,
        }
        if self.eigenvalues is not None:
            out["eigenvalues"] = [[float(m.real), float(m.imag)] for m in self.eigenvalues]
            out["tau_ref"] = self.tau_ref
        if self.trivial_multiplier_residual is not None:
            out["trivial_multiplier_residual"] = float(self.trivial_multiplier_residual)
            m = self.all_multipliers[self.trivial_index]
            out["trivial_multiplier"] = [float(m.real), float(m.imag)]
        return out


def _finite(x: float):
    return float(x) if np.isfinite(x) else None


@dataclass(eq=False)
class Equilibrium:
    grid: Grid
    state: np.ndarray
    residual: float
    iterations: int = 0
    spectrum: SpectrumReport | None = None

    @property
    def anchor(self) -> np.ndarray:
        return self.state

    @property
    def index(self) -> int:
        if self.spectrum is None:
            raise ValueError("spectrum not computed")
        return self.spectrum.morse_index

    def verify(self, f: NonlinearField) -> float:
        return equilibrium_residual(f, self.grid, self.state)


@dataclass(frozen=True)
class Section:
    anchor: np.ndarray
    normal: np.ndarray

    def value(self, grid: Grid, u: np.ndarray) -> float:
        return grid.inner(self.normal, u - self.anchor)


@dataclass(eq=False)
class PeriodicOrbit:
    samples: TrajectorySegment
    period: float
    section: Section
    closure_defect: float
    divisor_defects: dict = field(default_factory=dict)
    degenerate: bool = False
    sigma_ratio: float = np.nan
    iterations: int = 0
    spectrum: SpectrumReport | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> Grid:
        return self.samples.grid

    @property
    def anchor(self) -> np.ndarray:
        return self.samples.states[0]

    @property
    def index(self) -> int:
        if self.spectrum is None:
            raise ValueError("spectrum not computed")
        return self.spectrum.morse_index

    def verify(self) -> float:
        s = self.samples.states
        return float(self.grid.norm(s[-1] - s[0]) / self.grid.norm(s[0]))

    def phase_states(self) -> np.ndarray:
        """One period of distinct samples (last duplicate dropped)."""
        return self.samples.states[:-1]

    def shifted(self, steps: int) -> "PeriodicOrbit":
        """Same orbit re-anchored ``steps`` samples later (spectrum dropped)."""
        ph = np.roll(self.phase_states(), -int(steps), axis=0)
        seg = TrajectorySegment(self.grid, self.samples.times, np.vstack([ph, ph[:1]]),
                                dict(self.samples.step_meta))
        anchor = ph[0]
        return PeriodicOrbit(seg, self.period, Section(anchor, self.section.normal), self.closure_defect,
                             dict(self.divisor_defects), self.degenerate, self.sigma_ratio, self.iterations)


CriticalElement = Union[Equilibrium, PeriodicOrbit]


# --- equilibria ------------------------------------------------------------

def equilibrium_residual(f: NonlinearField, grid: Grid, e: np.ndarray) -> float:
    return float(grid.norm(vector_field(f, grid, e)))


def jacobian(f: NonlinearField, grid: Grid, e: np.ndarray, dense: bool = False):
    """L + diag(a) + sum_k diag(b_k) G_k at the state ``e``."""
    p = nodal_gradient(grid, e)
    a = f.du(grid.nodes, e, p)
    b = np.asarray(f.dp(grid.nodes, e, p)).reshape(grid.size, grid.dim)
    L = grid.lap.matrix
    if sp.issparse(L) and not dense:
        J = L + sp.diags(a)
        for k, g in enumerate(grid.grads):
            if np.any(b[:, k]):
                J = J + sp.diags(b[:, k]) @ g.matrix
        return J.tocsc()
    J = grid.lap.dense() + np.diag(a)
    for k, g in enumerate(grid.grads):
        if np.any(b[:, k]):
            J += b[:, k][:, None] * g.dense()
    return J


def _solve_checked(J, rhs: np.ndarray, cond_limit: float) -> np.ndarray:
    if sp.issparse(J):
        try:
            lu = spla.splu(J)
        except RuntimeError as exc:
            raise SingularJacobian(f"Jacobian factorisation failed: {exc}") from exc
        n = J.shape[0]
        inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="T"))
        cond = spla.onenormest(J) * spla.onenormest(inv)
        if not np.isfinite(cond) or cond > cond_limit:
            raise SingularJacobian(f"Jacobian condition estimate {cond:.3g}")
        return lu.solve(rhs)
    cond = np.linalg.cond(J, 1)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularJacobian(f"Jacobian condition number {cond:.3g}")
    return sla.solve(J, rhs)


def find_equilibrium(f: NonlinearField, grid: Grid, guess: np.ndarray, *, tol: float = EQ_TOL,
                     max_iter: int = 50, cond_limit: float = 1e12) -> Equilibrium:
    """Damped Newton on Lap e + f(x, e, grad e) = 0."""
    e = grid.check_state(guess).astype(float).copy()
    if not np.all(np.isfinite(e)):
        raise ValueError("guess must be finite")
    r = vector_field(f, grid, e)
    res = float(grid.norm(r))
    for it in range(max_iter + 1):
        if res <= tol:
            return Equilibrium(grid, e, equilibrium_residual(f, grid, e), it)
        if it == max_iter:
            break
        delta = _solve_checked(jacobian(f, grid, e), -r, cond_limit)
        lam = 1.0
        for _ in range(30):
            trial = e + lam * delta
            r_t = vector_field(f, grid, trial)
            res_t = float(grid.norm(r_t))
            if np.isfinite(res_t) and res_t < res:
                break
            lam *= 0.5
        else:
            raise NoConvergence(f"Newton line search stalled at residual {res:.3g}")
        e, r, res = trial, r_t, res_t
    raise NoConvergence(f"no convergence after {max_iter} Newton steps (residual {res:.3g})")


def classify(spec: SpectrumReport, margin: float | None = None) -> dict:
    """Flags by thresholding |mu| against the unit circle with margin ``margin``."""
    d = spec.margin if margin is None else margin
    mu = np.asarray(spec.all_multipliers)
    others = np.delete(mu, spec.trivial_index) if spec.trivial_index is not None else mu
    on_circle = np.abs(np.abs(others) - 1.0) <= d
    near_one = np.abs(others - 1.0) <= d
    if spec.kind == "equilibrium":
        simple = not np.any(near_one)
        hyperbolic = not np.any(on_circle)
    else:
        triv_ok = spec.trivial_index is not None and abs(mu[spec.trivial_index] - 1.0) <= d
        simple = bool(triv_ok and not np.any(near_one))
        hyperbolic = bool(simple and not np.any(on_circle))
    # multipliers inside the margin band are reported via the flags, not counted
    index = int(np.sum(np.abs(others) > 1.0 + d))
    return {"simple": bool(simple), "hyperbolic": bool(hyperbolic), "degenerate": not hyperbolic,
            "morse_index": index}


def _finish(spec: SpectrumReport) -> SpectrumReport:
    c = classify(spec)
    spec.morse_index = c.pop("morse_index")
    spec.flags = c
    mu = np.asarray(spec.all_multipliers)
    others = np.delete(mu, spec.trivial_index) if spec.trivial_index is not None else mu
    spec.gap = float(np.min(np.abs(np.abs(others) - 1.0))) if others.size else np.inf
    return spec


def equilibrium_spectrum(f: NonlinearField, eq: Equilibrium, k: int | None = None, *,
                         tau_ref: float = 1.0, margin: float = UNIT_MARGIN) -> SpectrumReport:
    grid = eq.grid
    N = grid.size
    k = N if k is None else int(k)
    if k < 1 or k > N:
        raise ValueError(f"k={k} outside 1..{N}")
    J = jacobian(f, grid, eq.state, dense=True)
    if f.gradient_free:
        # W^(1/2) J W^(-1/2) is symmetric when b = 0
        s = np.sqrt(grid.weights)
        S = s[:, None] * J / s[None, :]
        lam, y = np.linalg.eigh(0.5 * (S + S.T))
        vec = y / s[:, None]
        lam = lam.astype(complex)
    else:
        lam, vec = sla.eig(J)
    order = np.lexsort((-lam.imag, -lam.real))
    lam, vec = lam[order], vec[:, order]
    mu = np.exp(lam * tau_ref)
    spec = SpectrumReport("equilibrium", mu[:k], mu, eigenvalues=lam[:k], tau_ref=tau_ref,
                          all_eigenvalues=lam, vectors=vec, margin=margin)
    spec = _finish(spec)
    spec.morse_index = int(np.sum(lam.real > 0))
    eq.spectrum = spec
    return spec


# --- periodic orbits -------------------------------------------------------

DEFAULT_ORBIT_SCHEME = "ars343"
DEFAULT_ORBIT_STEPS = 1000


def period_map(f: NonlinearField, orbit: PeriodicOrbit) -> np.ndarray:
    """Dense Pi(omega, 0) from a propagated identity basis (cached on the orbit)."""
    P = orbit._cache.get("period_map")
    if P is None:
        coeffs = linearize_along(f, orbit.samples)
        P = propagate(coeffs, np.eye(orbit.grid.size), orbit.samples.t0, orbit.samples.t1)
        orbit._cache["period_map"] = P
        orbit._cache["coeffs"] = coeffs
    return P


def orbit_coefficients(f: NonlinearField, orbit: PeriodicOrbit):
    c = orbit._cache.get("coeffs")
    if c is None:
        c = orbit._cache["coeffs"] = linearize_along(f, orbit.samples)
    return c


def _winner_alignment(grid: Grid, vecs: np.ndarray, target: np.ndarray) -> np.ndarray:
    w = grid.weights
    num = np.abs(vecs.conj().T @ (w * target))
    den = np.sqrt(np.real(np.einsum("i,ij,ij->j", w, vecs.conj(), vecs))) * grid.norm(target)
    return num / np.maximum(den, 1e-300)


def period_map_spectrum(f: NonlinearField, orbit: PeriodicOrbit, k: int | None = None, *,
                        margin: float = UNIT_MARGIN) -> SpectrumReport:
    grid = orbit.grid
    N = grid.size
    k = N if k is None else int(k)
    if k < 1 or k > N:
        raise ValueError(f"k={k} outside 1..{N}")
    P = period_map(f, orbit)
    mu, vec = sla.eig(P)
    order = np.lexsort((-mu.imag, -np.abs(mu)))
    mu, vec = mu[order], vec[:, order]
    dp0 = vector_field(f, grid, orbit.anchor)
    resid = float(grid.norm(P @ dp0 - dp0) / grid.norm(dp0))
    align = _winner_alignment(grid, vec, dp0)
    near = np.abs(mu - 1.0) <= max(margin, 10 * resid)
    cand = np.where(near)[0] if np.any(near) else np.arange(mu.size)
    triv = int(cand[np.argmax(align[cand])])
    spec = SpectrumReport("periodic", mu[:k], mu, trivial_multiplier_residual=resid, trivial_index=triv,
                          vectors=vec, margin=margin)
    spec = _finish(spec)
    orbit.spectrum = spec
    return spec


def w_orthonormalize(grid: Grid, V: np.ndarray) -> np.ndarray:
    """Columns of V made orthonormal in the weighted inner product (QR)."""
    s = np.sqrt(grid.weights)
    q, r = np.linalg.qr(s[:, None] * V)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    return (q * sign) / s[:, None]


def subspace_multipliers(f: NonlinearField, orbit: PeriodicOrbit, basis: np.ndarray) -> np.ndarray:
    """Ritz values of the period map on span(basis).

    Exact for invariant subspaces, and free of the round-off floor a dense
    eigen-solve has for strongly damped modes.
    """
    grid = orbit.grid
    Q = w_orthonormalize(grid, np.asarray(basis, dtype=float).reshape(grid.size, -1))
    coeffs = orbit_coefficients(f, orbit)
    PQ = propagate(coeffs, Q, orbit.samples.t0, orbit.samples.t1)
    B = Q.T @ (grid.weights[:, None] * PQ)
    return np.linalg.eigvals(B)


def fourier_mode_multipliers(f: NonlinearField, orbit: PeriodicOrbit, kmax: int) -> dict[int, np.ndarray]:
    """Multipliers of the orbit's period map on each Fourier pair cos(kx), sin(kx)."""
    grid = orbit.grid
    if not grid.periodic or grid.dim != 1:
        raise ValueError("Fourier mode multipliers need a one-dimensional periodic grid")
    ax = grid.axes[0]
    x = 2 * np.pi * (grid.nodes[:, 0] - ax.lo) / (ax.hi - ax.lo)
    out = {}
    for k in range(kmax + 1):
        basis = np.ones((grid.size, 1)) if k == 0 else np.column_stack([np.cos(k * x), np.sin(k * x)])
        out[k] = subspace_multipliers(f, orbit, basis)
    return out


def _closure(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    return float(grid.norm(v - u) / max(grid.norm(u), 1e-300))


def _divisor_defects(f, grid, u, T, n_steps, scheme, k_max) -> dict[int, float]:
    out = {}
    for k in range(2, k_max + 1):
        tr = integrate(f, grid, u, T / k, T / n_steps, scheme=scheme, stride=10**9)
        out[k] = _closure(grid, u, tr.final)
    return out


def find_periodic_orbit(f: NonlinearField, grid: Grid, guess: np.ndarray, guess_period: float, *,
                        n_steps: int = DEFAULT_ORBIT_STEPS, scheme: str = DEFAULT_ORBIT_SCHEME,
                        tol: float = ORBIT_TOL, max_iter: int = 25, k_max: int = 6,
                        rcond: float = 1e-9, degenerate_ratio: float = 1e-7) -> PeriodicOrbit:
    """Newton on (u, T) for S(T)u = u with the phase fixed by a Poincare section."""
    if not guess_period > 0:
        raise ValueError("guess_period must be positive")
    u = grid.check_state(guess).astype(float).copy()
    F0 = vector_field(f, grid, u)
    nF = float(grid.norm(F0))
    if nF <= 1e-12 * max(1.0, float(grid.norm(u))):
        raise ReturnNotFound("guess is stationary; no section normal")
    section = Section(u.copy(), F0 / nF)

    # locate the first return to the section from its negative side
    tr = integrate(f, grid, u, 2.0 * guess_period, guess_period / n_steps, scheme=scheme)
    g = np.array([section.value(grid, s) for s in tr.states])
    T = None
    for i in range(1, g.size):
        if g[i - 1] < 0 <= g[i] and tr.times[i] > 0.25 * guess_period:
            T = float(tr.times[i - 1] + (tr.times[i] - tr.times[i - 1]) * (-g[i - 1]) / (g[i] - g[i - 1]))
            break
    if T is None:
        raise ReturnNotFound("trajectory does not re-cross the section within 2x the guessed period")

    N = grid.size
    bottom = np.append(grid.weights * section.normal, 0.0)
    sigma_ratio = np.nan
    closure = np.inf
    for it in range(max_iter + 1):
        traj = integrate(f, grid, u, T, T / n_steps, scheme=scheme)
        r = traj.final - u
        closure = _closure(grid, u, traj.final)
        s_val = section.value(grid, u)
        if float(grid.norm(vector_field(f, grid, u))) <= 1e-8 * max(1.0, float(grid.norm(u))):
            raise ReturnNotFound("Newton iterate converged to an equilibrium")
        coeffs = linearize_along(f, traj)
        P = propagate(coeffs, np.eye(N), 0.0, T)
        J = np.zeros((N + 1, N + 1))
        J[:N, :N] = P - np.eye(N)
        J[:N, N] = vector_field(f, grid, traj.final)
        J[N] = bottom
        sv = np.linalg.svd(J, compute_uv=False)
        sigma_ratio = float(sv[-1] / sv[0])
        if closure <= tol and abs(s_val) <= tol * max(1.0, float(grid.norm(u))):
            break
        if it == max_iter:
            raise NoConvergence(f"periodic Newton: closure {closure:.3g} after {max_iter} steps")
        rhs = -np.append(r, s_val)
        step = np.linalg.lstsq(J, rhs, rcond=rcond)[0]
        u = u + step[:N]
        T = T + step[N]
        if not (0.1 * guess_period < T < 10 * guess_period) or not np.all(np.isfinite(u)):
            raise ReturnNotFound(f"return time left the admissible range (T={T:.4g})")
        log.debug("orbit newton it=%d closure=%.3e T=%.12g", it, closure, T)

    divisors = _divisor_defects(f, grid, u, T, n_steps, scheme, k_max)
    closing = [k for k, d in divisors.items() if d <= 10 * tol]
    if closing:
        k = max(closing)
        log.info("period %.6g is not minimal; dividing by %d", T, k)
        T = T / k
        traj = integrate(f, grid, u, T, T / n_steps, scheme=scheme)
        closure = _closure(grid, u, traj.final)
        divisors = _divisor_defects(f, grid, u, T, n_steps, scheme, k_max)
    return PeriodicOrbit(traj, T, section, closure, divisors, bool(sigma_ratio < degenerate_ratio),
                         sigma_ratio, it)


# --- continuation ----------------------------------------------------------

def continue_element(f_family: Callable[[float], NonlinearField], element: CriticalElement,
                     eps_grid: Sequence[float], **kw) -> list[tuple[float, CriticalElement]]:
    """Natural-parameter continuation with secant prediction.

    Index changes along the path are recorded in each element's
    ``spectrum.flags['index_change']``.
    """
    eps_grid = [float(e) for e in eps_grid]
    path: list[tuple[float, CriticalElement]] = []
    prev_index = None
    states: list[np.ndarray] = []
    for i, eps in enumerate(eps_grid):
        f = f_family(eps)
        try:
            if isinstance(element, Equilibrium):
                guess = element.state if not states else states[-1]
                if len(states) >= 2:
                    e0, e1 = eps_grid[i - 2], eps_grid[i - 1]
                    guess = states[-1] + (states[-1] - states[-2]) * (eps - e1) / (e1 - e0)
                el = find_equilibrium(f, element.grid, guess, **kw)
                spec = equilibrium_spectrum(f, el)
            else:
                src = element if not path else path[-1][1]
                el = find_periodic_orbit(f, element.grid, src.anchor, src.period, **kw)
                spec = period_map_spectrum(f, el)
        except NumericalFailure as exc:
            raise ContinuationLost(f"corrector failed at eps={eps:g}: {exc}", eps, path) from exc
        spec.flags["index_change"] = prev_index is not None and spec.morse_index != prev_index
        prev_index = spec.morse_index
        states.append(el.anchor.copy())
        path.append((eps, el))
    return path


def index_changes(path: list[tuple[float, CriticalElement]]) -> list[float]:
    return [eps for eps, el in path if el.spectrum is not None and el.spectrum.flags.get("index_change")]
