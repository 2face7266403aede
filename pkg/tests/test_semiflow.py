from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolax.errors import BlowUp
from parabolax.grid import DomainSpec, build_grid
from parabolax.nonlinearity import chafee_infante, polynomial, zero_field
from parabolax.semiflow import evaluation_map, integrate, semigroup_defect


def test_heat_solution():
    g = build_grid(DomainSpec.interval(0, 1), 256)
    x = g.nodes[:, 0]
    tr = integrate(zero_field(), g, np.sin(np.pi * x), 0.1, 1e-4)
    exact = np.exp(-np.pi**2 * 0.1) * np.sin(np.pi * x)
    assert np.max(np.abs(tr.final - exact)) <= 1e-4
    assert tr.step_meta["max_step_residual"] <= 1e-8


def test_quadratic_blowup():
    g = build_grid(DomainSpec.interval(0, 1, "neumann"), 32)
    with pytest.raises(BlowUp) as info:
        integrate(polynomial("u**2"), g, np.full(g.size, 10.0), 0.2, 1e-4)
    assert info.value.t_star < 0.12
    # ODE blow-up time is 0.1; the threshold 1e6 is reached just before
    assert info.value.t_star > 0.09


def test_single_step(dirichlet128):
    u0 = np.sin(np.pi * dirichlet128.nodes[:, 0])
    tr = integrate(chafee_infante(15), dirichlet128, u0, 0.01, 0.01)
    assert tr.times.tolist() == [0.0, 0.01]
    assert tr.step_meta["max_step_residual"] <= 1e-8


@pytest.mark.parametrize("T,dt", [(0.0, 1e-3), (1.0, 0.0), (0.1, 0.2), (-1.0, 1e-3)])
def test_bad_durations(dirichlet128, T, dt):
    with pytest.raises(ValueError):
        integrate(zero_field(), dirichlet128, np.zeros(dirichlet128.size), T, dt)


def test_stride_keeps_final(dirichlet128):
    tr = integrate(zero_field(), dirichlet128, np.ones(dirichlet128.size), 0.0105, 1e-3, stride=4)
    assert tr.times[-1] == pytest.approx(0.0105)
    assert np.all(np.diff(tr.times) > 0)


def test_aligned_step_grids_compose_exactly(dirichlet128):
    u0 = np.sin(np.pi * dirichlet128.nodes[:, 0])
    assert semigroup_defect(chafee_infante(15), dirichlet128, u0, 0.05, 0.05, 1e-3) <= 1e-13


def test_linear_semigroup_exact(dirichlet128):
    u0 = dirichlet128.nodes[:, 0] * (1 - dirichlet128.nodes[:, 0])
    assert semigroup_defect(zero_field(), dirichlet128, u0, 0.05, 0.05, 1e-3) <= 1e-8


def _ci_defects(dts):
    g = build_grid(DomainSpec.interval(0, 1), 64)
    x = g.nodes[:, 0]
    u0 = np.sin(np.pi * x) + 0.3 * np.sin(3 * np.pi * x)
    return [semigroup_defect(chafee_infante(15), g, u0, 0.05, 0.05, dt, scheme="euler") for dt in dts]


def test_nonlinear_semigroup_defect():
    # ceil(0.1/dt) = 23 while the two halves take 12 steps each: the step grids differ
    dt = 4.5e-3
    (d,) = _ci_defects([dt])
    assert d <= 5 * dt


def test_semigroup_defect_order():
    d1, d2 = _ci_defects([4.5e-3, 2.25e-3])
    assert d1 / d2 > 1.8


def test_self_convergence_order():
    g = build_grid(DomainSpec.interval(0, 1), 64)
    x = g.nodes[:, 0]
    u0 = np.sin(np.pi * x) + 0.5 * np.sin(2 * np.pi * x)
    f = chafee_infante(15)
    for scheme, order in (("euler", 1), ("cn", 2), ("ars343", 3)):
        u = [integrate(f, g, u0, 0.2, dt, scheme=scheme).final for dt in (0.02, 0.01, 0.005)]
        rate = np.log2(g.norm(u[0] - u[1]) / g.norm(u[1] - u[2]))
        assert rate > order - 0.3, scheme


def test_evaluation_map_sine(circle64):
    x, u, p = evaluation_map(circle64, np.sin(circle64.nodes[:, 0]), [0.0])
    np.testing.assert_allclose([x[0], u, p[0]], [0.0, 0.0, 1.0], atol=1e-10)


def test_evaluation_map_constant(circle64):
    x0 = circle64.nodes[7]
    x, u, p = evaluation_map(circle64, np.full(circle64.size, 2.0), x0)
    assert x[0] == x0[0] and u == 2.0 and abs(p[0]) <= 1e-12


def test_evaluation_map_parabola():
    g = build_grid(DomainSpec.interval(0, 1), 63)
    x = g.nodes[:, 0]
    xx, u, p = evaluation_map(g, x * (1 - x), [0.5])
    assert xx[0] == 0.5
    assert u == pytest.approx(0.25, abs=1e-14)
    assert abs(p[0]) <= 1e-10


def test_evaluation_map_off_grid(circle64):
    with pytest.raises(ValueError):
        evaluation_map(circle64, np.zeros(64), [0.01])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_heat_max_norm_non_increasing(seed):
    g = build_grid(DomainSpec.interval(0, 1), 48)
    r = np.random.default_rng(seed)
    x = g.nodes[:, 0]
    u0 = sum(r.normal() * np.sin(k * np.pi * x) / k for k in range(1, 6))
    tr = integrate(zero_field(), g, u0, 0.1, 2e-3, scheme="euler")
    m = np.max(np.abs(tr.states), axis=1)
    assert np.all(np.diff(m) <= 1e-10)


def test_deterministic(dirichlet128):
    u0 = np.sin(3 * dirichlet128.nodes[:, 0])
    a = integrate(chafee_infante(15), dirichlet128, u0, 0.05, 1e-3)
    b = integrate(chafee_infante(15), dirichlet128, u0, 0.05, 1e-3)
    assert np.array_equal(a.states, b.states)
