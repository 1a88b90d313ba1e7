import networkx as nx
import numpy as np
import pytest

from lgsm.graph import Family, FAMILY_MINIMAL, build_graph, generate_family


def random_connected_graphs(count, max_n=7, seed=0):
    """Seeded connected G(n, p) samples with 1 <= n <= max_n."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(1, max_n + 1))
        g = generate_family(Family.ERDOS_RENYI, {"n": n, "p": float(rng.uniform(0.3, 0.9))},
                            seed=int(rng.integers(2**31)))
        if g.is_connected():
            out.append(g)
    return out


def minimal_family_graphs():
    return [generate_family(f, FAMILY_MINIMAL[f], seed=0) for f in Family]


def to_networkx(g):
    h = nx.Graph()
    h.add_nodes_from(range(g.num_nodes))
    h.add_edges_from(g.edges)
    return h


@pytest.fixture
def p3():
    return build_graph(3, [(0, 1), (1, 2)])


@pytest.fixture
def p4():
    return build_graph(4, [(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def c3():
    return build_graph(3, [(0, 1), (1, 2), (2, 0)])


@pytest.fixture
def c4():
    return generate_family(Family.CYCLE, {"n": 4})
