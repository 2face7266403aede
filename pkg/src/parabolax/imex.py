"""Implicit-explicit Runge-Kutta tableaux and shifted linear solvers.

The Laplacian is treated implicitly, everything else explicitly.  All
implicit stages of the shipped schemes share a single diagonal coefficient,
so one factorisation of ``I - gamma*h*L`` per step size suffices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError


@dataclass(frozen=True)
class Tableau:
    name: str
    order: int
    ai: np.ndarray  # implicit coefficients, lower triangular incl. diagonal
    ae: np.ndarray  # explicit coefficients, strictly lower triangular
    bi: np.ndarray
    be: np.ndarray
    c: np.ndarray

    @property
    def stages(self) -> int:
        return len(self.c)

    @property
    def diagonal(self) -> float:
        d = np.unique(np.diag(self.ai)[np.diag(self.ai) != 0])
        return float(d[0]) if d.size else 0.0


def _t(name, order, ai, ae, bi, be, c):
    arr = lambda v: np.array(v, dtype=float)
    return Tableau(name, order, arr(ai), arr(ae), arr(bi), arr(be), arr(c))


# backward Euler on the Laplacian, forward Euler on f
EULER = _t("euler", 1, [[0, 0], [0, 1]], [[0, 0], [1, 0]], [0, 1], [1, 0], [0, 1])

# Crank-Nicolson on the Laplacian with Heun on f
CN = _t("cn", 2, [[0, 0], [0.5, 0.5]], [[0, 0], [1, 0]], [0.5, 0.5], [0.5, 0.5], [0, 1])

_g = 0.4358665215
_b1 = -1.5 * _g**2 + 4 * _g - 0.25
_b2 = 1.5 * _g**2 - 5 * _g + 1.25
# Ascher-Ruuth-Spiteri (3,4,3)
ARS343 = _t(
    "ars343", 3,
    [[0, 0, 0, 0], [0, _g, 0, 0], [0, (1 - _g) / 2, _g, 0], [0, _b1, _b2, _g]],
    [[0, 0, 0, 0], [_g, 0, 0, 0], [0.3212788860, 0.3966543747, 0, 0],
     [-0.105858296, 0.5529291479, 0.5529291479, 0]],
    [0, _b1, _b2, _g],
    [0, _b1, _b2, _g],
    [0, _g, (1 + _g) / 2, 1],
)

SCHEMES = {t.name: t for t in (EULER, CN, ARS343)}


def get_tableau(name: str) -> Tableau:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


class ShiftedSolver:
    """Factorisation of ``I - c*L`` with plain and transposed solves."""

    def __init__(self, lap, c: float):
        self.c = c
        if sp.issparse(lap):
            n = lap.shape[0]
            a = (sp.identity(n, format="csc") - c * lap.tocsc()).tocsc()
            self._lu = spla.splu(a)
            self._sparse = True
        else:
            a = np.eye(lap.shape[0]) - c * np.asarray(lap)
            self._lu = sla.lu_factor(a, check_finite=False)
            self._sparse = False

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self._sparse:
            return self._lu.solve(np.ascontiguousarray(b), trans="T" if transpose else "N")
        return sla.lu_solve(self._lu, b, trans=1 if transpose else 0, check_finite=False)


class SolverCache:
    """Shifted solvers keyed by the shift value."""

    def __init__(self, lap):
        self.lap = lap
        self._store: dict[float, ShiftedSolver] = {}

    def get(self, c: float) -> ShiftedSolver:
        key = float(np.float64(c))
        s = self._store.get(key)
        if s is None:
            if len(self._store) > 16:
                self._store.clear()
            s = self._store[key] = ShiftedSolver(self.lap, key)
        return s
