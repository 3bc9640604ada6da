import numpy as np
import pytest
from hypothesis import strategies as st

from powerconsensus import ControllerParams, MicrogridNetwork, Scenario, ZipLoadBank, build_laplacian
from powerconsensus.netmodel import comm_laplacian
from powerconsensus.simulator import LoadEvent

BELK_EDGES = [(1, 2), (2, 3), (1, 4), (1, 5), (2, 6), (3, 7), (3, 8), (3, 9), (3, 10)]


def t_network(g1=1.0, g2=1.0):
    return MicrogridNetwork(2, 1, ((0, 2, g1), (1, 2, g2)), ((0, 1),))


def belk10_network(g=0.6):
    return MicrogridNetwork(3, 7, tuple((a - 1, b - 1, g) for a, b in BELK_EDGES), ((0, 1), (1, 2)))


def belk10_scenario(**kw):
    net = belk10_network()
    params = ControllerParams([0.04, 0.08, 0.04], comm_laplacian(net), D=[1e-4] * 3)
    P0 = np.array([-35.0, -35.0, 0, 0, 0, 0, 0])
    events = [LoadEvent(i, 9.5e-3, 10.5e-3, Pstar=-35.0) for i in range(2, 7)]
    kw.setdefault("t_end", 0.012)
    return Scenario(net, ZipLoadBank(np.zeros(7), np.zeros(7), P0), params, [48.0] * 3, [48.0] * 7,
                    events=events, **kw)


def t_scenario(**kw):
    net = t_network()
    params = ControllerParams([1.0, 1.0], comm_laplacian(net), D=[0.01, 0.01])
    kw.setdefault("t_end", 0.02)
    return Scenario(net, ZipLoadBank([-1.0], [0.1], [0.0]), params, [50.0, 46.08], [48.0], **kw)


def random_network(rng, ns, nl, extra=2, gmin=0.2, gmax=3.0):
    """Connected random network: a random spanning tree plus ``extra`` chords; comm graph is a path."""
    n = ns + nl
    order = rng.permutation(n)
    edges = {}
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges[(min(a, b), max(a, b))] = float(rng.uniform(gmin, gmax))
    for _ in range(extra):
        a, b = rng.choice(n, 2, replace=False)
        edges.setdefault((int(min(a, b)), int(max(a, b))), float(rng.uniform(gmin, gmax)))
    comm = tuple((i, i + 1) for i in range(ns - 1))
    return MicrogridNetwork(ns, nl, tuple((a, b, g) for (a, b), g in edges.items()), comm)


def random_zi_bank(rng, nl, imax=2.0, ymax=0.2):
    return ZipLoadBank(-rng.uniform(0, imax, nl), rng.uniform(0, ymax, nl), np.zeros(nl))


def random_zip_bank(rng, nl, imax=1.0, ymax=0.2, pmax=40.0):
    return ZipLoadBank(-rng.uniform(0, imax, nl), rng.uniform(0, ymax, nl), -rng.uniform(0, pmax, nl))


seeds = st.integers(min_value=0, max_value=2**31 - 1)


@pytest.fixture
def tnet():
    return t_network()


@pytest.fixture
def tblocks():
    return build_laplacian(t_network())


@pytest.fixture
def belk_blocks():
    return build_laplacian(belk10_network())


ACCEPTANCE_LINES: list = []


@pytest.fixture
def record():
    """Append one pass/fail line for an acceptance criterion; shown in the terminal summary."""

    def _record(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
