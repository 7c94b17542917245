import numpy as np
import pytest

from bigat.cluster import SOURCE_KMEANS, ClusterAssignment
from bigat.data import SynthConfig, synth_event
from bigat.graph import build_from_edges


def random_graph(n: int, n_edges: int, rng: np.random.Generator):
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    pick = rng.choice(len(pairs), size=min(n_edges, len(pairs)), replace=False)
    return build_from_edges(n, [pairs[i] for i in pick])


def random_clusters(n: int, rng: np.random.Generator) -> ClusterAssignment:
    labels = rng.integers(1, 3, n)
    labels[0], labels[-1] = 1, 2
    return ClusterAssignment(labels.astype(np.int64), np.full(n, SOURCE_KMEANS, dtype=object))


@pytest.fixture(scope="session")
def default_event():
    return synth_event(SynthConfig())


@pytest.fixture(scope="session")
def clean_event():
    return synth_event(SynthConfig(label_noise=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; the lines are echoed in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
