import numpy as np
import pytest

from lppa import data as D
from lppa import topology as T

ACCEPTANCE_LINES = []


def report(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture
def acceptance_report():
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def blobs():
    return D.generate_synthetic(2, 3, 120, 4.0, seed=7)


@pytest.fixture
def full5():
    g = T.build_topology("full", 5)
    return g, T.sinkhorn_knopp(g)


@pytest.fixture
def ring3():
    g = T.build_topology("ring", 3)
    return g, T.sinkhorn_knopp(g)


def random_strong_digraph(rng, n, p_extra=0.3):
    """Random digraph made strongly connected by a Hamiltonian cycle."""
    perm = rng.permutation(n)
    edges = [(int(perm[i]), int(perm[(i + 1) % n])) for i in range(n)]
    mask = rng.random((n, n)) < p_extra
    edges += [(i, j) for i in range(n) for j in range(n) if i != j and mask[i, j]]
    return T.Digraph.from_edges(n, edges)
