"""Shared fixtures and the per-criterion acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from mjls_fsmc import burst_stats, finite_horizon_lqr, infinite_horizon_lqr, load_pendulum
from mjls_fsmc.config import bundled_gains_path
from mjls_fsmc.lqr import load_gains


# -- pendulum fixtures (computed once per session) ---------------------------


@pytest.fixture(scope="session")
def pendulum():
    return load_pendulum()


@pytest.fixture(scope="session")
def pend_stats(pendulum):
    return burst_stats(pendulum.channel)


@pytest.fixture(scope="session")
def pend_schedule(pendulum, pend_stats):
    return finite_horizon_lqr(pendulum.plant, pend_stats, 720)


@pytest.fixture(scope="session")
def pend_stationary(pendulum, pend_stats):
    return infinite_horizon_lqr(pendulum.plant, pend_stats)


@pytest.fixture(scope="session")
def pend_stationary_phi0(pendulum, pend_stats):
    return infinite_horizon_lqr(pendulum.plant.with_phi(0.0), pend_stats)


@pytest.fixture(scope="session")
def imported_gains(pendulum):
    return {name: load_gains(bundled_gains_path(name), pendulum.channel.n_states)
            for name in ("K_B", "K_M", "K_P")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": []})
    entry["outcomes"].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = all(entry["outcomes"])
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {entry['title']}")
