from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from parabolax.critical import (classify, continue_element, equilibrium_spectrum, find_equilibrium,
                                find_periodic_orbit, fourier_mode_multipliers, index_changes, period_map,
                                period_map_spectrum)
from parabolax.errors import ContinuationLost, ReturnNotFound
from parabolax.grid import DomainSpec, build_grid
from parabolax.nonlinearity import chafee_infante, linear_rotating, zero_field
from parabolax.semiflow import vector_field


@pytest.fixture(scope="module")
def rotating_orbit():
    g = build_grid(DomainSpec.circle(2 * np.pi), 64)
    f = linear_rotating(1.0)
    orb = find_periodic_orbit(f, g, np.sin(g.nodes[:, 0]), 6.0)
    period_map_spectrum(f, orb)
    return f, orb


def _shooting_max(lam):
    """Positive Dirichlet solution of e'' + lam e - e^3 = 0 on (0, 1) by shooting."""
    def end(s):
        sol = solve_ivp(lambda x, y: [y[1], -lam * y[0] + y[0] ** 3], (0, 1), [0, s], rtol=1e-12, atol=1e-12)
        return sol.y[0, -1]

    s = brentq(end, 1.0, 10.0, xtol=1e-14)
    sol = solve_ivp(lambda x, y: [y[1], -lam * y[0] + y[0] ** 3], (0, 0.5), [0, s], rtol=1e-12, atol=1e-12)
    return sol.y[0, -1]


def test_heat_equilibrium(dirichlet128, rng):
    eq = find_equilibrium(zero_field(), dirichlet128, rng.normal(size=128), tol=1e-12)
    assert np.max(np.abs(eq.state)) <= 1e-10
    assert eq.residual <= 1e-12


def test_chafee_infante_positive_equilibrium():
    g = build_grid(DomainSpec.interval(0, 1), 127)
    x = g.nodes[:, 0]
    f = chafee_infante(15)
    eq = find_equilibrium(f, g, 2 * np.sin(np.pi * x))
    assert eq.residual <= 1e-10
    assert eq.verify(f) <= 1e-10
    peak = eq.state[np.argmin(np.abs(x - 0.5))]
    assert peak == pytest.approx(_shooting_max(15.0), rel=1e-5)


def test_below_pitchfork_only_zero(dirichlet128):
    x = dirichlet128.nodes[:, 0]
    for amp in (0.1, 0.5, 1.0):
        eq = find_equilibrium(chafee_infante(5), dirichlet128, amp * np.sin(np.pi * x))
        assert np.max(np.abs(eq.state)) <= 1e-9


def test_heat_spectrum(dirichlet128):
    eq = find_equilibrium(zero_field(), dirichlet128, np.zeros(128))
    spec = equilibrium_spectrum(zero_field(), eq, 5)
    k = np.arange(1, 6)
    np.testing.assert_allclose(spec.eigenvalues.real, -(k * np.pi) ** 2, rtol=1e-3)
    assert spec.morse_index == 0
    assert spec.flags["hyperbolic"] and spec.flags["simple"]


@pytest.mark.parametrize("lam,index", [(15, 1), (50, 2)])
def test_chafee_infante_zero_index(dirichlet128, lam, index):
    f = chafee_infante(lam)
    eq = find_equilibrium(f, dirichlet128, np.zeros(128))
    spec = equilibrium_spectrum(f, eq, 3)
    k = np.arange(1, 4)
    np.testing.assert_allclose(spec.eigenvalues.real, lam - (k * np.pi) ** 2, rtol=1e-4)
    assert spec.morse_index == index
    assert classify(spec) == {"simple": True, "hyperbolic": True, "degenerate": False, "morse_index": index}
    np.testing.assert_allclose(spec.multipliers, np.exp(spec.eigenvalues * spec.tau_ref))


def test_spectrum_k_too_large(dirichlet128):
    eq = find_equilibrium(zero_field(), dirichlet128, np.zeros(128))
    with pytest.raises(ValueError):
        equilibrium_spectrum(zero_field(), eq, 129)


def test_index_invariant_under_permutation(dirichlet128, rng):
    f = chafee_infante(50)
    eq = find_equilibrium(f, dirichlet128, np.zeros(128))
    spec = equilibrium_spectrum(f, eq)
    perm = rng.permutation(128)
    g = build_grid(DomainSpec.interval(0, 1), 128)
    from parabolax.critical import jacobian
    J = jacobian(f, g, eq.state, dense=True)
    lam = np.linalg.eigvals(J[np.ix_(perm, perm)])
    assert int(np.sum(lam.real > 0)) == spec.morse_index


def test_rotating_orbit_period(rotating_orbit):
    f, orb = rotating_orbit
    assert abs(orb.period - 2 * np.pi) <= 1e-6
    x = orb.grid.nodes[:, 0]
    # the orbit is a translate of sin(x - t); compare amplitude and closure
    assert orb.closure_defect <= 1e-6
    amp = np.sqrt(2 * orb.grid.inner(orb.anchor, orb.anchor) / (2 * np.pi))
    assert amp == pytest.approx(1.0, rel=1e-6)
    assert orb.grid.norm(vector_field(f, orb.grid, orb.anchor) + np.gradient(orb.anchor, x)) < 0.05


def test_rotating_orbit_minimal(rotating_orbit):
    _, orb = rotating_orbit
    assert set(orb.divisor_defects) == set(range(2, 7))
    assert min(orb.divisor_defects.values()) > 10 * 1e-6


def test_rotating_multipliers(rotating_orbit):
    f, orb = rotating_orbit
    spec = orb.spectrum
    mods = np.sort(np.abs(spec.all_multipliers))[::-1]
    assert mods[0] == pytest.approx(np.exp(2 * np.pi), rel=1e-3)
    assert mods[1] == pytest.approx(1.0, abs=1e-5) and mods[2] == pytest.approx(1.0, abs=1e-5)
    assert spec.trivial_multiplier_residual <= 1e-6
    assert spec.flags["degenerate"] and not spec.flags["hyperbolic"]
    assert spec.morse_index == 1


def test_rotating_fourier_modes(rotating_orbit):
    f, orb = rotating_orbit
    modes = fourier_mode_multipliers(f, orb, 3)
    for k in range(4):
        expect = np.exp(2 * np.pi * (1 - k**2))
        np.testing.assert_allclose(np.abs(modes[k]), expect, rtol=1e-3)


def test_trivial_residual_bound(rotating_orbit):
    _, orb = rotating_orbit
    assert orb.spectrum.trivial_multiplier_residual <= 10 * orb.closure_defect + 1e-8


def test_period_map_linear(rotating_orbit, rng):
    f, orb = rotating_orbit
    P = period_map(f, orb)
    v = rng.normal(size=64)
    np.testing.assert_allclose(P @ (3.5 * v), 3.5 * (P @ v), rtol=1e-14, atol=1e-10)
    assert not (P @ np.zeros(64)).any()


def test_perturbed_guess_same_family():
    g = build_grid(DomainSpec.circle(2 * np.pi), 64)
    f = linear_rotating(1.0)
    orb = find_periodic_orbit(f, g, 1.1 * np.sin(g.nodes[:, 0]), 6.0)
    spec = period_map_spectrum(f, orb)
    assert abs(orb.period - 2 * np.pi) <= 1e-6
    assert spec.flags["degenerate"]


def test_heat_has_no_orbit(dirichlet128):
    x = dirichlet128.nodes[:, 0]
    with pytest.raises(ReturnNotFound):
        find_periodic_orbit(zero_field(), dirichlet128, np.sin(np.pi * x), 1.0)


def test_continuation_constant_family(dirichlet128):
    f = chafee_infante(15)
    eq = find_equilibrium(f, dirichlet128, 3 * np.sin(np.pi * dirichlet128.nodes[:, 0]))
    path = continue_element(lambda e: f, eq, [0.0, 0.5, 1.0])
    for _, el in path:
        np.testing.assert_allclose(el.state, eq.state, atol=1e-12)


def test_continuation_shifted_eigenvalue(dirichlet128):
    f0 = chafee_infante(15)
    eq = find_equilibrium(f0, dirichlet128, np.zeros(128))
    lead0 = equilibrium_spectrum(f0, eq, 1).eigenvalues[0].real
    path = continue_element(lambda e: chafee_infante(15 + e), eq, np.linspace(0, 1, 5))
    for eps, el in path:
        assert el.index == 1
        assert abs(el.spectrum.eigenvalues[0].real - lead0 - eps) <= 1e-6
    assert index_changes(path) == []


def test_continuation_index_change():
    g = build_grid(DomainSpec.interval(0, 1), 64)
    eq = find_equilibrium(chafee_infante(38), g, np.zeros(64))
    try:
        path = continue_element(lambda e: chafee_infante(38 + e), eq, np.linspace(0, 3, 7))
    except ContinuationLost:
        return
    changes = index_changes(path)
    assert len(changes) == 1 and 4 * np.pi**2 - 38 <= changes[0] <= 3.0
