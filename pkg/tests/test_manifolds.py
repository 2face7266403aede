from __future__ import annotations

import numpy as np
import pytest

from parabolax.critical import equilibrium_spectrum, find_equilibrium
from parabolax.errors import NotFound
from parabolax.grid import DomainSpec, build_grid
from parabolax.manifolds import (ConnectingOrbit, adjoint_stable_normal_frame, distance_to, grow_unstable, rate_estimate,
                                 shoot_connection, stable_projection, transversality_report, unstable_frame)
from parabolax.nonlinearity import chafee_infante, polynomial, zero_field
from parabolax.semiflow import integrate
from parabolax.tangent import constant_coefficients, propagate


def _eq(f, grid, guess):
    e = find_equilibrium(f, grid, guess)
    equilibrium_spectrum(f, e)
    return e


def _normalized(grid, v):
    return v / grid.norm(v)


@pytest.fixture(scope="module")
def g64():
    return build_grid(DomainSpec.interval(0, 1), 64)


@pytest.fixture(scope="module")
def ci50(g64):
    x = g64.nodes[:, 0]
    f = chafee_infante(50)
    return f, _eq(f, g64, np.zeros(64)), _eq(f, g64, 5 * np.sin(2 * np.pi * x)), _eq(f, g64, 7 * np.sin(np.pi * x))


@pytest.fixture(scope="module")
def conn50(ci50):
    f, zero, phi2, _ = ci50
    return shoot_connection(f, zero, phi2, horizon=3.0)


def _frame_matches(grid, V, modes):
    x = grid.nodes[:, 0]
    assert V.shape[1] == len(modes)
    for k, v in zip(modes, V.T):
        target = _normalized(grid, np.sin(k * np.pi * x))
        assert min(grid.norm(v - target), grid.norm(v + target)) <= 1e-3


def test_unstable_frame_lambda15(g64):
    f = chafee_infante(15)
    fr = unstable_frame(f, _eq(f, g64, np.zeros(64)))
    _frame_matches(g64, fr.vectors, [1])


def test_unstable_frame_heat(g64):
    fr = unstable_frame(zero_field(), _eq(zero_field(), g64, np.zeros(64)))
    assert fr.size == 0 and fr.zero_index


def test_unstable_frame_lambda50(ci50, g64):
    f, zero, _, _ = ci50
    fr = unstable_frame(f, zero)
    _frame_matches(g64, fr.vectors, [1, 2])
    np.testing.assert_allclose(fr.vectors.T @ (g64.weights[:, None] * fr.vectors), np.eye(2), atol=1e-10)


def test_adjoint_equals_unstable_when_self_adjoint(ci50):
    f, _, phi2, _ = ci50
    a = adjoint_stable_normal_frame(f, phi2).vectors
    u = unstable_frame(f, phi2).vectors
    assert np.max(np.abs(a - u)) <= 1e-8


def test_adjoint_heat_empty(g64):
    assert adjoint_stable_normal_frame(zero_field(), _eq(zero_field(), g64, np.zeros(64))).size == 0


def test_adjoint_normals_eigen_decay(g64, rng):
    # nonsymmetric linearization: L = Lap + 15 + 0.5 d/dx
    f = polynomial("15*u - u**3 + 0.5*p")
    e = _eq(f, g64, np.zeros(64))
    psi = adjoint_stable_normal_frame(f, e)
    xi = unstable_frame(f, e)
    lam = psi.exponents[0].real
    # adjoint and direct frames differ when b != 0
    assert g64.norm(psi.vectors[:, 0] - xi.vectors[:, 0]) > 1e-3
    c = constant_coefficients(g64, 15.0, 0.5, 0.0, 0.5, 1e-3, "ars343")
    v = rng.normal(size=64)
    t = 0.5
    lhs = g64.inner(psi.vectors[:, 0], propagate(c, v, 0.0, t))
    assert lhs == pytest.approx(np.exp(lam * t) * g64.inner(psi.vectors[:, 0], v), rel=1e-3)
    vs = stable_projection(g64, xi.vectors, psi.vectors, v)
    assert abs(g64.inner(psi.vectors[:, 0], vs)) <= 1e-12
    # the IMEX split does not commute with L, so the pairing picks up O(dt^3) leakage only
    leak = abs(g64.inner(psi.vectors[:, 0], propagate(c, vs, 0.0, t)))
    assert leak <= 1e-6 * np.exp(lam * t) * g64.norm(vs)


def test_rate_growth_lambda15(g64):
    f = chafee_infante(15)
    e = _eq(f, g64, np.zeros(64))
    grow, dec = rate_estimate(f, e, unstable_frame(f, e), 2.0)
    assert grow.rate == pytest.approx(15 - np.pi**2, rel=0.02)
    assert grow.ci[0] <= grow.rate <= grow.ci[1]


def test_rate_decay_heat(g64):
    e = _eq(zero_field(), g64, np.zeros(64))
    grow, dec = rate_estimate(zero_field(), e, unstable_frame(zero_field(), e), 2.0)
    assert grow is None
    assert dec.rate == pytest.approx(-np.pi**2, rel=0.02)


def test_rate_rejects_zero_vector(g64):
    f = chafee_infante(15)
    e = _eq(f, g64, np.zeros(64))
    with pytest.raises(ValueError):
        rate_estimate(f, e, unstable_frame(f, e), 2.0, vectors=np.zeros(64))


def test_grow_unstable_reaches_attractors(g64):
    x = g64.nodes[:, 0]
    f = chafee_infante(15)
    e = _eq(f, g64, np.zeros(64))
    phi = find_equilibrium(f, g64, 3 * np.sin(np.pi * x)).state
    res = grow_unstable(f, e, unstable_frame(f, e), 1e-3, 2, 5.0)
    assert len(res) == 2
    ends = sorted(tr.final[32] for tr in res)
    d = [min(g64.norm(tr.final - phi), g64.norm(tr.final + phi)) for tr in res]
    assert max(d) <= 1e-3 and ends[0] < 0 < ends[1]


def test_grow_unstable_index_zero(g64):
    e = _eq(zero_field(), g64, np.zeros(64))
    assert len(grow_unstable(zero_field(), e, unstable_frame(zero_field(), e), 1e-3, 4, 1.0)) == 0


def test_grow_unstable_nesting(g64):
    f = chafee_infante(15)
    e = _eq(f, g64, np.zeros(64))
    fr = unstable_frame(f, e)
    short = grow_unstable(f, e, fr, 1e-3, 2, 1.0)
    long = grow_unstable(f, e, fr, 1e-3, 2, 2.0)
    for a, b in zip(short, long):
        onward = integrate(f, g64, a.final, 1.0, 1e-3).final
        assert g64.norm(onward - b.final) <= 1e-10 * g64.norm(b.final)


def test_shoot_lambda15(g64):
    x = g64.nodes[:, 0]
    f = chafee_infante(15)
    zero = _eq(f, g64, np.zeros(64))
    phi = _eq(f, g64, 3 * np.sin(np.pi * x))
    c = shoot_connection(f, zero, phi, horizon=5.0)
    assert c.terminal_distance <= 1e-4
    assert c.initial_distance <= 1e-2 + 1e-2 + g64.norm(phi.state)
    assert c.entry_time is not None and c.entry_time <= c.trajectory.t1
    assert distance_to(zero, c.trajectory.states[:1])[0][0] == pytest.approx(1e-2, rel=1e-12)


def test_no_homoclinic_in_gradient_flow(g64):
    f = chafee_infante(15)
    zero = _eq(f, g64, np.zeros(64))
    with pytest.raises(NotFound):
        shoot_connection(f, zero, zero, horizon=2.0)


def test_index_zero_source_rejected(ci50):
    f, zero, _, phi1 = ci50
    with pytest.raises(ValueError):
        shoot_connection(f, phi1, zero)


def test_transverse_one_by_two(ci50, conn50):
    f = ci50[0]
    rep = transversality_report(f, conn50)
    assert rep.pairing_matrix.shape == (1, 2)
    assert rep.rank_decision == "transverse"
    assert rep.smallest_singular_value > 1e-6


def test_transversality_invariances(ci50, conn50):
    f, zero, _, _ = ci50
    Xi = unstable_frame(f, zero).vectors
    base = transversality_report(f, conn50)
    scaled = Xi.copy()
    scaled[:, 0] *= -2.0
    r1 = transversality_report(f, conn50, source_vectors=scaled)
    r2 = transversality_report(f, conn50, source_vectors=Xi[:, ::-1])
    assert not np.allclose(r1.pairing_matrix, base.pairing_matrix)
    assert r1.rank_decision == r2.rank_decision == base.rank_decision
    tr = conn50.trajectory
    for ts in np.linspace(tr.t0 + 0.25 * (tr.t1 - tr.t0), tr.t1, 5):
        assert transversality_report(f, conn50, t_star=float(ts)).rank_decision == base.rank_decision


def test_target_index_zero_zero_rows(ci50):
    f, _, phi2, phi1 = ci50
    c = shoot_connection(f, phi2, phi1, horizon=3.0)
    rep = transversality_report(f, c)
    assert rep.pairing_matrix.shape == (0, 1)
    assert rep.rank_decision == "transverse"


def test_structural_non_transversality(ci50):
    f, zero, phi2, _ = ci50
    tr = integrate(f, phi2.grid, phi2.state + 1e-2 * unstable_frame(f, phi2).vectors[:, 0], 0.2, 1e-3)
    c = ConnectingOrbit(phi2, zero, tr, 0.1, np.array([1.0]), 0.0, 1e-2)
    rep = transversality_report(f, c)
    assert rep.pairing_matrix.shape == (2, 1)
    assert rep.rank_decision == "non_transverse"


def test_t_star_outside_window(ci50, conn50):
    with pytest.raises(ValueError):
        transversality_report(ci50[0], conn50, t_star=conn50.trajectory.t1 + 1.0)
