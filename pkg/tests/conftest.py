from __future__ import annotations

import numpy as np
import pytest

from parabolax.grid import DomainSpec, build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def dirichlet128():
    return build_grid(DomainSpec.interval(0.0, 1.0, "dirichlet"), 128)


@pytest.fixture(scope="session")
def circle64():
    return build_grid(DomainSpec.circle(2 * np.pi), 64)


_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    ok, seen = _CRITERIA.get(n, (True, title))[0], title
    if report.when == "call" or report.failed:
        _CRITERIA[n] = (ok and not report.failed, seen)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
