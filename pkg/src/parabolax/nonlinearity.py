"""Nonlinear fields f(x, u, p) with analytic first partials, and bumps.

Array conventions: ``x`` has shape ``(..., d)``, ``u`` shape ``(...)`` and
``p`` shape ``(..., d)``.  ``value`` and ``du`` return shape ``(...)``;
``dp`` returns ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

Fn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _bcast(x, u, p):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if p.ndim == 0:
        p = p[None]
    return x, u, p


@dataclass(frozen=True, eq=False)
class NonlinearField:
    value: Fn
    du: Fn
    dp: Fn
    description: str
    gradient_free: bool = False  # dp identically zero

    def __call__(self, x, u, p):
        return self.value(*_bcast(x, u, p))


def eval_field(f: NonlinearField, x, u, p):
    return f.value(*_bcast(x, u, p))


def partials(f: NonlinearField, x, u, p):
    x, u, p = _bcast(x, u, p)
    return f.du(x, u, p), f.dp(x, u, p)


def _zeros_like_p(u, p):
    return np.zeros(np.broadcast_shapes(np.shape(u) + (p.shape[-1],), p.shape))


def zero_field() -> NonlinearField:
    z = lambda x, u, p: np.zeros(np.broadcast_shapes(np.shape(u), p.shape[:-1]))
    return NonlinearField(z, z, lambda x, u, p: _zeros_like_p(u, p), "zero", True)


def chafee_infante(lam: float) -> NonlinearField:
    lam = float(lam)

    def shape(u, p):
        return np.broadcast_shapes(np.shape(u), p.shape[:-1])

    return NonlinearField(
        lambda x, u, p: np.broadcast_to(lam * u - u**3, shape(u, p)).copy(),
        lambda x, u, p: np.broadcast_to(lam - 3 * u**2, shape(u, p)).copy(),
        lambda x, u, p: _zeros_like_p(u, p),
        f"chafee_infante(lambda={lam:g})",
        True,
    )


def linear_rotating(c: float = 1.0) -> NonlinearField:
    """f(u, p) = u - c p_1 (one space dimension)."""
    c = float(c)

    def dp(x, u, p):
        out = _zeros_like_p(u, p)
        out[..., 0] = -c
        return out

    return NonlinearField(
        lambda x, u, p: u - c * p[..., 0],
        lambda x, u, p: np.ones(np.broadcast_shapes(np.shape(u), p.shape[:-1])),
        dp,
        f"linear_rotating(c={c:g})",
    )


_FORBIDDEN = ("Piecewise", "Abs", "Heaviside", "sign", "Max", "Min", "floor", "ceiling", "DiracDelta")


def polynomial(expr: str, dim: int = 1) -> NonlinearField:
    """Parse a polynomial in ``u`` and ``p`` with smooth x-dependent coefficients.

    Symbols: ``u``; ``p`` (1D) or ``p1``, ``p2``; ``x`` (1D) or ``x``, ``y``.
    """
    import sympy

    u = sympy.Symbol("u")
    xs = [sympy.Symbol("x")] if dim == 1 else [sympy.Symbol("x"), sympy.Symbol("y")]
    ps = [sympy.Symbol("p")] if dim == 1 else [sympy.Symbol("p1"), sympy.Symbol("p2")]
    local = {s.name: s for s in [u, *xs, *ps]}
    try:
        e = sympy.sympify(expr, locals=local)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"cannot parse field expression {expr!r}: {exc}") from exc
    for name in _FORBIDDEN:
        if e.atoms(getattr(sympy, name)) or e.has(getattr(sympy, name)):
            raise ConfigError(f"non-smooth construct {name} is not allowed in {expr!r}")
    extra = e.free_symbols - set(local.values())
    if extra:
        raise ConfigError(f"unknown symbols {sorted(map(str, extra))} in {expr!r}")
    if e.has(sympy.zoo, sympy.oo, -sympy.oo, sympy.nan):
        raise ConfigError(f"{expr!r} is not finite")
    if not e.is_polynomial(u, *ps):
        raise ConfigError(f"{expr!r} is not polynomial in u and p")

    args = [*xs, u, *ps]
    fv = sympy.lambdify(args, e, "numpy")
    fu = sympy.lambdify(args, sympy.diff(e, u), "numpy")
    fps = [sympy.lambdify(args, sympy.diff(e, q), "numpy") for q in ps]
    grad_free = all(sympy.diff(e, q) == 0 for q in ps)

    def call(fn, x, u_, p):
        shape = np.broadcast_shapes(np.shape(u_), p.shape[:-1], x.shape[:-1])
        out = fn(*[x[..., i] for i in range(dim)], u_, *[p[..., i] for i in range(dim)])
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def dp(x, u_, p):
        return np.stack([call(g, x, u_, p) for g in fps], axis=-1)

    return NonlinearField(
        lambda x, u_, p: call(fv, x, u_, p),
        lambda x, u_, p: call(fu, x, u_, p),
        dp,
        f"polynomial({expr})",
        grad_free,
    )


CATALOG = {
    "zero": lambda params, dim: zero_field(),
    "heat": lambda params, dim: zero_field(),
    "chafee_infante": lambda params, dim: chafee_infante(params.get("lambda", 15.0)),
    "linear_rotating": lambda params, dim: linear_rotating(params.get("c", 1.0)),
    "polynomial": lambda params, dim: polynomial(str(params["expr"]), dim),
}


def field_from_spec(name: str, params: dict | None = None, dim: int = 1) -> NonlinearField:
    if name not in CATALOG:
        raise ConfigError(f"unknown field {name!r}; choose from {sorted(CATALOG)}")
    try:
        return CATALOG[name](dict(params or {}), dim)
    except KeyError as exc:
        raise ConfigError(f"field {name!r} is missing parameter {exc}") from exc


def fd_partials_error(f: NonlinearField, x, u, p, h: float = 1e-4) -> float:
    """Largest relative mismatch between stored partials and centred differences."""
    x, u, p = _bcast(x, u, p)
    du, dp = partials(f, x, u, p)
    num_u = (f.value(x, u + h, p) - f.value(x, u - h, p)) / (2 * h)
    errs = [np.abs(num_u - du) / np.maximum(1.0, np.abs(du))]
    for i in range(p.shape[-1]):
        e = np.zeros(p.shape[-1])
        e[i] = h
        num = (f.value(x, u, p + e) - f.value(x, u, p - e)) / (2 * h)
        errs.append(np.abs(num - dp[..., i]) / np.maximum(1.0, np.abs(dp[..., i])))
    return float(max(np.max(e) for e in errs))


# --- bumps -----------------------------------------------------------------

def mollifier(s: np.ndarray) -> np.ndarray:
    """exp(1 - 1/(1 - s^2)) on |s| < 1, zero elsewhere; equals 1 at 0."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - si * si))
    return out


def mollifier_prime(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    q = 1.0 - si * si
    out[inside] = np.exp(1.0 - 1.0 / q) * (-2.0 * si / q**2)
    return out


@dataclass(frozen=True, eq=False)
class PerturbationBump:
    """Tensor mollifier in evaluation space (x, u, p).

    ``avoid`` holds sampled evaluation triples (rows of length 2d+1); none may
    fall inside the support box inflated by ``inflation``.
    """

    center: np.ndarray
    widths: np.ndarray
    amplitude: float = 1.0
    sign: int = 1
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    avoid: np.ndarray | None = field(default=None, repr=False)
    inflation: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        w = np.asarray(self.widths, dtype=float)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "widths", w)
        if c.ndim != 1 or c.size % 2 != 1 or w.shape != c.shape:
            raise ValueError("center and widths must be vectors of length 2d+1")
        if np.any(w <= 0):
            raise ValueError("bump widths must be positive")
        if self.amplitude == 0 or self.sign not in (1, -1):
            raise ValueError("bump needs a nonzero amplitude and sign +-1")
        if self.box_lo is not None:
            lo, hi = np.asarray(self.box_lo, float), np.asarray(self.box_hi, float)
            if np.any(c - w < lo - 1e-14 * np.abs(lo)) or np.any(c + w > hi + 1e-14 * np.abs(hi)):
                raise ValueError("bump support leaves the box E")
        if self.avoid is not None and len(self.avoid):
            if np.any(self._inside(np.asarray(self.avoid), self.inflation)):
                raise ValueError("bump support meets the avoid set")

    @property
    def dim(self) -> int:
        return (self.center.size - 1) // 2

    def _scaled(self, z: np.ndarray) -> np.ndarray:
        return (z - self.center) / self.widths

    def _inside(self, z: np.ndarray, factor: float = 1.0) -> np.ndarray:
        return np.max(np.abs(self._scaled(z)), axis=-1) < factor

    def _stack(self, x, u, p):
        x, u, p = _bcast(x, u, p)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(u), p.shape[:-1])
        d = self.dim
        return np.concatenate([np.broadcast_to(x, shape + (d,)),
                               np.broadcast_to(u, shape)[..., None],
                               np.broadcast_to(p, shape + (d,))], axis=-1)

    def value(self, x, u, p):
        s = self._scaled(self._stack(x, u, p))
        return self.sign * self.amplitude * np.prod(mollifier(s), axis=-1)

    def _grad_z(self, x, u, p):
        s = self._scaled(self._stack(x, u, p))
        m = mollifier(s)
        mp = mollifier_prime(s)
        out = np.empty_like(s)
        for i in range(s.shape[-1]):
            others = np.prod(np.delete(m, i, axis=-1), axis=-1)
            out[..., i] = mp[..., i] * others / self.widths[i]
        return self.sign * self.amplitude * out

    def du(self, x, u, p):
        return self._grad_z(x, u, p)[..., self.dim]

    def dp(self, x, u, p):
        return self._grad_z(x, u, p)[..., self.dim + 1:]

    def support_contains(self, z: np.ndarray) -> np.ndarray:
        return self._inside(np.asarray(z, dtype=float))

    def as_field(self) -> NonlinearField:
        return NonlinearField(self.value, self.du, self.dp, "bump")


def compose_perturbed(f: NonlinearField, g, eps: float) -> NonlinearField:
    """Field f + eps*g; ``g`` is any object with value/du/dp."""
    eps = float(eps)
    if eps == 0.0:
        return NonlinearField(f.value, f.du, f.dp, f.description, f.gradient_free)

    def value(x, u, p):
        return f.value(x, u, p) + eps * g.value(x, u, p)

    def du(x, u, p):
        return f.du(x, u, p) + eps * g.du(x, u, p)

    def dp(x, u, p):
        return f.dp(x, u, p) + eps * g.dp(x, u, p)

    return NonlinearField(value, du, dp, f"{f.description}+{eps:g}*g")


def stack_evaluation(x: np.ndarray, u: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rows (x, u, p) from node coordinates ``(N, d)``, values ``(..., N)`` and ``p`` ``(d, ..., N)``."""
    u = np.asarray(u)
    d = x.shape[1]
    xs = np.broadcast_to(x, u.shape + (d,))
    ps = np.moveaxis(np.asarray(p), 0, -1)
    return np.concatenate([xs, u[..., None], ps], axis=-1)

