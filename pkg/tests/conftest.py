"""Shared fixtures and the acceptance-summary reporter."""
import numpy as np
import pytest

from odgen.city import ODMatrix, UrbanGraph

_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.when == "call":
        _ACCEPTANCE_RESULTS[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        word = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{word}  {name}")


def tiny_graph(n=4, d=3, seed=0):
    """A small valid city with positive symmetric distances."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 10, size=(n, 2))
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    adj = np.zeros((n, n))
    for i in range(n):
        j = np.argsort(dist[i])[1]  # nearest neighbor
        adj[i, j] = adj[j, i] = 1.0
    feats = rng.uniform(1.0, 100.0, size=(n, d))
    return UrbanGraph(features=feats, adjacency=adj, distance=dist,
                      d_demographic=min(2, d), city_id=f"tiny{seed}")


def tiny_od(n=4, seed=0, scale=50.0):
    rng = np.random.default_rng(seed + 1000)
    return ODMatrix(rng.uniform(0.0, scale, size=(n, n)), space_tag="raw")


@pytest.fixture
def graph4():
    return tiny_graph(4)


@pytest.fixture
def od4():
    return tiny_od(4)
