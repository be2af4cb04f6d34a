import os

import numpy as np
import pytest

from manifold_sde.graph_ops import GraphConfig, build_graph, build_operator_field, default_bandwidth
from manifold_sde.manifolds import sample_sphere, sample_swiss_roll
from manifold_sde.neighbors import build_index

FULL = os.environ.get("IMD_FULL_PROTOCOL", "") not in ("", "0")


@pytest.fixture(scope="session")
def s2_small():
    """Unit S^2, N=1000, with graph and operator field at the default bandwidth."""
    cloud = sample_sphere(2, 1.0, 1000, seed=7)
    index = build_index(cloud)
    g = build_graph(cloud, GraphConfig(default_bandwidth(cloud, index), 2), index)
    return cloud, index, g, build_operator_field(g)


@pytest.fixture(scope="session")
def roll_small():
    cloud = sample_swiss_roll(1.5, 15.5, 20.0, 2000, seed=3)
    return cloud, build_index(cloud)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""

    def _record(label: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
