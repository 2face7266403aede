"""Domains, grids and discrete differential operators.

Periodic axes use Fourier spectral differentiation.  Dirichlet and Neumann
axes use fourth-order centred finite differences closed by odd (Dirichlet)
or even (Neumann) reflection, which keeps the Laplacian self-adjoint in the
grid's quadrature inner product.  Rectangles are tensor products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError

BC_KINDS = ("dirichlet", "neumann", "periodic")
MIN_RESOLUTION = 16


@dataclass(frozen=True)
class DomainSpec:
    """Box domain with one boundary-condition tag per axis."""

    kind: str
    extents: tuple[tuple[float, float], ...]
    bc: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("interval", "circle", "rectangle"):
            raise ConfigError(f"unknown domain kind {self.kind!r}")
        want = 2 if self.kind == "rectangle" else 1
        if len(self.extents) != want or len(self.bc) != want:
            raise ConfigError(f"{self.kind} needs {want} axis extent(s) and bc tag(s)")
        for lo, hi in self.extents:
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi - lo <= 0:
                raise ConfigError(f"degenerate extent ({lo}, {hi})")
        for tag in self.bc:
            if tag not in BC_KINDS:
                raise ConfigError(f"unknown boundary condition {tag!r}")
        if self.kind == "circle" and self.bc != ("periodic",):
            raise ConfigError("a circle only admits periodic boundary conditions")

    @classmethod
    def interval(cls, a: float, b: float, bc: str = "dirichlet") -> "DomainSpec":
        return cls("interval", ((float(a), float(b)),), (bc,))

    @classmethod
    def circle(cls, length: float = 2 * np.pi) -> "DomainSpec":
        return cls("circle", ((0.0, float(length)),), ("periodic",))

    @classmethod
    def rectangle(cls, ax: float, bx: float, ay: float, by: float,
                  bc: str | Sequence[str] = "dirichlet") -> "DomainSpec":
        tags = (bc, bc) if isinstance(bc, str) else tuple(bc)
        return cls("rectangle", ((float(ax), float(bx)), (float(ay), float(by))), tags)

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.extents]))


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """Matrix acting on grid states (dense ndarray or scipy sparse)."""

    matrix: object
    symmetry_tag: str = "none"

    def __matmul__(self, v):
        return self.matrix @ v

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def T(self) -> "LinearOperator":
        return LinearOperator(self.matrix.T.copy() if not self.is_sparse
                              else self.matrix.T.tocsr(), self.symmetry_tag)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.array(self.matrix)


@dataclass(frozen=True)
class Axis:
    """One-dimensional factor of a tensor grid."""

    lo: float
    hi: float
    bc: str
    n: int
    points: np.ndarray
    weights: np.ndarray
    lap: object
    grad: object

    @property
    def h(self) -> float:
        if self.bc == "periodic":
            return (self.hi - self.lo) / self.n
        if self.bc == "dirichlet":
            return (self.hi - self.lo) / (self.n + 1)
        return (self.hi - self.lo) / (self.n - 1)

    def full_points(self) -> np.ndarray:
        """Node coordinates including eliminated Dirichlet boundary nodes."""
        if self.bc == "dirichlet":
            return np.concatenate([[self.lo], self.points, [self.hi]])
        return self.points


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid with quadrature weights and cached operators.

    States are flat vectors of length ``size``; the last axis varies fastest.
    """

    domain: DomainSpec
    resolution: tuple[int, ...]
    axes: tuple[Axis, ...]
    nodes: np.ndarray
    weights: np.ndarray
    lap: LinearOperator = field(repr=False)
    grads: tuple[LinearOperator, ...] = field(repr=False)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.n for ax in self.axes)

    @property
    def periodic(self) -> bool:
        return all(ax.bc == "periodic" for ax in self.axes)

    def inner(self, v: np.ndarray, w: np.ndarray):
        """Weighted inner product; column-wise for 2D arrays."""
        if np.ndim(v) == 1 and np.ndim(w) == 1:
            return float(np.dot(self.weights * v, w))
        return np.einsum("i,i...,i...->...", self.weights, v, w)

    def norm(self, v: np.ndarray):
        return np.sqrt(np.abs(self.inner(v, v)))

    def node_index(self, x0, atol: float | None = None) -> int:
        """Index of the node at ``x0``; raises if ``x0`` is not a node."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if x0.shape != (self.dim,):
            raise ValueError(f"point must have {self.dim} coordinates")
        d = np.max(np.abs(self.nodes - x0), axis=1)
        j = int(np.argmin(d))
        tol = atol if atol is not None else 1e-9 * max(hi - lo for lo, hi in self.domain.extents)
        if d[j] > tol:
            raise ValueError(f"{x0.tolist()} is not a grid node")
        return j

    def check_state(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.size:
            raise ValueError(f"state has {u.shape[0]} entries, grid has {self.size} nodes")
        return u

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(*coords)`` at the nodes."""
        return np.asarray(fn(*self.nodes.T), dtype=float) * np.ones(self.size)


def _fourier_matrices(n: int, length: float) -> tuple[np.ndarray, np.ndarray]:
    k = np.fft.fftfreq(n, d=1.0 / n) * (2 * np.pi / length)
    k1 = k.copy()
    if n % 2 == 0:
        k1[n // 2] = 0.0
        k[n // 2] = np.pi * n / length
    eye = np.eye(n)
    fe = np.fft.fft(eye, axis=0)
    d1 = np.real(np.fft.ifft(1j * k1[:, None] * fe, axis=0))
    d2 = np.real(np.fft.ifft(-(k**2)[:, None] * fe, axis=0))
    return 0.5 * (d1 - d1.T), 0.5 * (d2 + d2.T)


_C2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_C1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_B1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0  # f'(x_1) from x_0..x_4


def _fd_dirichlet(n: int, h: float):
    # unknowns are nodes 1..n; nodes 0 and n+1 carry u = 0
    lap = sp.lil_matrix((n, n))
    grad = sp.lil_matrix((n, n))
    for i in range(n):
        for off, c in zip(range(-2, 3), _C2):
            j = i + off
            if 0 <= j < n:
                lap[i, j] += c
            elif j == -2 or j == n + 1:
                # odd reflection about the boundary node: u_{-1} = -u_1
                lap[i, 2 * (-1) - j if j < 0 else 2 * n - j] -= c
    for i in range(n):
        if i == 0:
            for k, c in enumerate(_B1[1:], start=0):
                grad[i, k] += c
        elif i == n - 1:
            for k, c in enumerate(_B1[1:], start=0):
                grad[i, n - 1 - k] -= c
        else:
            for off, c in zip(range(-2, 3), _C1):
                j = i + off
                if 0 <= j < n and c != 0.0:
                    grad[i, j] += c
    return lap.tocsr() / h**2, grad.tocsr() / h


def _fd_neumann(n: int, h: float):
    # nodes 0..n-1 include the boundary; even reflection u_{-j} = u_j
    lap = sp.lil_matrix((n, n))
    grad = sp.lil_matrix((n, n))
    for i in range(n):
        for off, c in zip(range(-2, 3), _C2):
            j = i + off
            if j < 0:
                j = -j
            elif j > n - 1:
                j = 2 * (n - 1) - j
            lap[i, j] += c
    for i in range(1, n - 1):
        if i == 1:
            for k, c in enumerate(_B1):
                grad[i, k] += c
        elif i == n - 2:
            for k, c in enumerate(_B1):
                grad[i, n - 1 - k] -= c
        else:
            for off, c in zip(range(-2, 3), _C1):
                if c != 0.0:
                    grad[i, i + off] += c
    return lap.tocsr() / h**2, grad.tocsr() / h


def _build_axis(lo: float, hi: float, bc: str, n: int) -> Axis:
    length = hi - lo
    if bc == "periodic":
        pts = lo + length * np.arange(n) / n
        w = np.full(n, length / n)
        grad, lap = _fourier_matrices(n, length)
    elif bc == "dirichlet":
        h = length / (n + 1)
        pts = lo + h * np.arange(1, n + 1)
        # uniform weights keep W*L symmetric; they sum to |axis|
        w = np.full(n, length / n)
        lap, grad = _fd_dirichlet(n, h)
    else:
        h = length / (n - 1)
        pts = lo + h * np.arange(n)
        w = np.full(n, h)
        w[0] = w[-1] = h / 2
        lap, grad = _fd_neumann(n, h)
    return Axis(lo, hi, bc, n, pts, w, lap, grad)


def build_grid(spec: DomainSpec, resolution: int | Sequence[int],
               allow_small: bool = False) -> Grid:
    """Build the grid and its operators for ``spec``.

    ``allow_small`` lifts the 16-nodes-per-axis floor (used in tests only).
    """
    res = (int(resolution),) * spec.dim if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if len(res) != spec.dim:
        raise ConfigError(f"need {spec.dim} resolution value(s), got {len(res)}")
    floor = 4 if allow_small else MIN_RESOLUTION
    if min(res) < floor:
        raise ConfigError(f"resolution must be at least {floor} per axis")
    axes = tuple(_build_axis(lo, hi, bc, n) for (lo, hi), bc, n in zip(spec.extents, spec.bc, res))

    if spec.dim == 1:
        ax = axes[0]
        nodes = ax.points[:, None]
        weights = ax.weights.copy()
        lap_m, grads_m = ax.lap, [ax.grad]
    else:
        ax, ay = axes
        X, Y = np.meshgrid(ax.points, ay.points, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        weights = np.outer(ax.weights, ay.weights).ravel()
        ix, iy = sp.identity(ax.n, format="csr"), sp.identity(ay.n, format="csr")
        lx, ly = sp.csr_matrix(ax.lap), sp.csr_matrix(ay.lap)
        gx, gy = sp.csr_matrix(ax.grad), sp.csr_matrix(ay.grad)
        lap_m = (sp.kron(lx, iy) + sp.kron(ix, ly)).tocsr()
        grads_m = [sp.kron(gx, iy).tocsr(), sp.kron(ix, gy).tocsr()]

    tag = "self_adjoint"
    lap = LinearOperator(lap_m, tag)
    grads = tuple(LinearOperator(g, "none") for g in grads_m)
    for arr in (nodes, weights):
        arr.setflags(write=False)
    return Grid(spec, res, axes, nodes, weights, lap, grads)


def laplacian(grid: Grid) -> LinearOperator:
    return grid.lap


def gradient(grid: Grid, state: np.ndarray) -> np.ndarray:
    """Discrete gradient, shape ``(dim, N)`` (or ``(dim, N, m)`` for batches)."""
    u = grid.check_state(state)
    return np.stack([g @ u for g in grid.grads])
