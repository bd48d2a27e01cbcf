import numpy as np
import pytest

from netlat.datasets import GeneratorConfig, generate_snapshot
from netlat.netmodel import (NetworkSnapshot, NetworkTopology, TrafficMatrix, generate_routing)
from netlat.oracle import with_ground_truth


def make_snapshot(n, links, caps, pairs, mean, peak=None, truth=False):
    topo = NetworkTopology(n, tuple(links), np.asarray(caps, dtype=float))
    routing = generate_routing(topo)
    mean = np.asarray(mean, dtype=float)
    peak = mean if peak is None else np.asarray(peak, dtype=float)
    traffic = TrafficMatrix(np.asarray(pairs).reshape(-1, 2), np.stack([mean, peak], axis=1))
    snap = NetworkSnapshot(topo, traffic, routing).validate()
    return with_ground_truth(snap) if truth else snap


def small_snapshot(seed, n_max=6, pairs_per_node=3):
    """Random labelled snapshot on 3..n_max nodes."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, n_max + 1))
    cfg = GeneratorConfig(n_min=n, n_max=n, degree_mean=float(rng.uniform(2.0, n - 1)),
                          degree_std=0.0, pairs_per_node=pairs_per_node)
    return generate_snapshot(cfg, seed)


@pytest.fixture
def path3():
    """0 - 1 - 2 with one pair 0->2 of demand 5 over capacity-10 links."""
    return make_snapshot(3, [(0, 1), (1, 2)], [10.0, 10.0], [(0, 2)], [5.0])


@pytest.fixture
def triangle():
    return make_snapshot(3, [(0, 1), (0, 2), (1, 2)], [10.0, 10.0, 10.0],
                         [(0, 1), (1, 2), (2, 0)], [1.0, 1.0, 1.0])


@pytest.fixture
def cycle4():
    return make_snapshot(4, [(0, 1), (1, 2), (2, 3), (0, 3)], [10.0] * 4, [(0, 2)], [1.0])


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
