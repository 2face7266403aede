from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolax.errors import ConfigError
from parabolax.grid import DomainSpec, build_grid, gradient, laplacian


def _sorted_eigs(grid):
    return np.sort(np.linalg.eigvals(laplacian(grid).dense()).real)[::-1]


def test_small_dirichlet_layout():
    g = build_grid(DomainSpec.interval(0, 1), 4, allow_small=True)
    np.testing.assert_allclose(g.nodes[:, 0], np.arange(1, 5) / 5, rtol=0, atol=1e-15)


def test_small_grid_rejected_without_flag():
    with pytest.raises(ConfigError):
        build_grid(DomainSpec.interval(0, 1), 8)


def test_circle_nodes_and_weights(circle64):
    np.testing.assert_allclose(np.diff(circle64.nodes[:, 0]), 2 * np.pi / 64, atol=1e-14)
    np.testing.assert_allclose(circle64.weights, 2 * np.pi / 64, rtol=1e-15)


def test_unit_square_weights():
    g = build_grid(DomainSpec.rectangle(0, 1, 0, 1), 32)
    assert g.size == 1024
    assert abs(g.weights.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("spec", [DomainSpec.interval(-1, 2, "neumann"), DomainSpec.interval(0, 3),
                                  DomainSpec.circle(5.0), DomainSpec.rectangle(0, 2, 0, 1, ("neumann", "periodic"))])
def test_weights_positive_and_sum_to_volume(spec):
    g = build_grid(spec, 20)
    assert np.all(g.weights > 0)
    assert abs(g.weights.sum() - spec.volume) <= 1e-12 * spec.volume


def test_circle_rejects_dirichlet():
    with pytest.raises(ConfigError):
        DomainSpec("circle", ((0.0, 1.0),), ("dirichlet",))


@pytest.mark.parametrize("ext", [(1.0, 1.0), (2.0, 1.0)])
def test_degenerate_extents(ext):
    with pytest.raises(ConfigError):
        DomainSpec.interval(*ext)


def test_build_is_deterministic():
    a = build_grid(DomainSpec.interval(0, 1, "neumann"), 33)
    b = build_grid(DomainSpec.interval(0, 1, "neumann"), 33)
    assert np.array_equal(a.nodes, b.nodes)
    assert np.array_equal(a.lap.dense(), b.lap.dense())


def test_dirichlet_first_eigenvalue():
    g = build_grid(DomainSpec.interval(0, 1), 256)
    lam = _sorted_eigs(g)[0]
    assert abs(lam + np.pi**2) <= 1e-4 * np.pi**2


def test_fourier_eigenvalues_exact(circle64):
    x = circle64.nodes[:, 0]
    L = laplacian(circle64)
    for k in range(1, 32):
        for v in (np.cos(k * x), np.sin(k * x)):
            np.testing.assert_allclose(L @ v, -k**2 * v, atol=1e-9 * k**2)


def test_neumann_constant_in_kernel():
    g = build_grid(DomainSpec.interval(0, 1, "neumann"), 40)
    out = laplacian(g) @ np.full(g.size, 3.7)
    assert np.max(np.abs(out)) <= 1e-10


def test_dirichlet_convergence_order():
    k = np.arange(1, 6)
    exact = -(k * np.pi) ** 2
    errs = []
    for n in (32, 64):
        lam = _sorted_eigs(build_grid(DomainSpec.interval(0, 1), n))[:5]
        errs.append(np.abs(lam - exact) / np.abs(exact))
    rate = np.log2(errs[0] / errs[1])
    # fourth-order stencil
    assert np.all(rate > 3.5)


@pytest.mark.parametrize("spec", [DomainSpec.interval(0, 1), DomainSpec.interval(0, 1, "neumann"),
                                  DomainSpec.rectangle(0, 1, 0, 2, ("dirichlet", "neumann"))])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_laplacian_self_adjoint(spec, seed):
    g = build_grid(spec, 24)
    r = np.random.default_rng(seed)
    v, w = r.standard_normal((2, g.size))
    L = laplacian(g)
    lhs = g.inner(L @ v, w) - g.inner(v, L @ w)
    scale = g.norm(L @ v) * g.norm(w) + g.norm(v) * g.norm(L @ w)
    assert abs(lhs) <= 1e-10 * scale


def test_gradient_linear_function():
    g = build_grid(DomainSpec.interval(0, 1, "neumann"), 41)
    du = gradient(g, g.nodes[:, 0])[0]
    np.testing.assert_allclose(du[1:-1], 1.0, atol=1e-10)


def test_gradient_sine_spectral(circle64):
    x = circle64.nodes[:, 0]
    np.testing.assert_allclose(gradient(circle64, np.sin(x))[0], np.cos(x), atol=1e-10)


@pytest.mark.parametrize("spec", [DomainSpec.interval(0, 1, "neumann"), DomainSpec.circle(),
                                  DomainSpec.rectangle(0, 1, 0, 1, "neumann")])
def test_gradient_of_constant_vanishes(spec):
    g = build_grid(spec, 20)
    assert np.max(np.abs(gradient(g, np.full(g.size, -2.5)))) <= 1e-12


def test_gradient_dimension_mismatch(circle64):
    with pytest.raises(ValueError):
        gradient(circle64, np.zeros(10))
