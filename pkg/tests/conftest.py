import numpy as np
import pytest

from cfrca.dynamics import DynamicScm, NoiseModel
from cfrca.graph import SummaryGraph
from cfrca.models import LinearTransition, ResidualMlp


def linear4_graph() -> SummaryGraph:
    return SummaryGraph.from_names(
        [("w", 2), ("x", 2), ("y", 2), ("z", 2)],
        [("w", "x"), ("x", "y"), ("x", "z"), ("y", "z")],
    )


def random_graph(rng: np.random.Generator, n_nodes: int, max_dim: int = 2, p_edge: float = 0.4) -> SummaryGraph:
    nodes = [(f"v{i}", int(rng.integers(1, max_dim + 1))) for i in range(n_nodes)]
    edges = [
        (f"v{i}", f"v{j}")
        for i in range(n_nodes)
        for j in range(n_nodes)
        if i != j and rng.random() < p_edge
    ]
    return SummaryGraph.from_names(nodes, edges)


def random_scm(rng: np.random.Generator, family: str, n_nodes: int | None = None, hidden: int = 8) -> DynamicScm:
    g = random_graph(rng, n_nodes or int(rng.integers(1, 7)))
    transitions = []
    for j in range(len(g)):
        if family == "lin":
            f = LinearTransition.init(g.input_dim(j), g.dims[j], rng)
            W = 0.2 * f.W
            W[:, -g.dims[j]:] -= 0.5 * np.eye(g.dims[j])  # damped self term keeps rollouts bounded
            f = LinearTransition(W, f.b)
        else:
            f = ResidualMlp.init(g.input_dim(j), g.dims[j], rng, hidden=hidden)
        transitions.append(f)
    variances = rng.uniform(0.01, 0.1, len(g))
    return DynamicScm(g, tuple(transitions), NoiseModel(tuple(variances)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
