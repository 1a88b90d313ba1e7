"""Undirected simple graphs, synthetic families and exact task labels."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DisconnectedGraph, InvalidEdge, InvalidParams

#: Marker used by :func:`bfs_distances` for nodes not reachable from the source.
UNREACHABLE = -1


@dataclass(frozen=True, eq=True)
class Graph:
    """Immutable undirected simple graph on nodes ``0..num_nodes-1``.

    Use :func:`build_graph` rather than the constructor; it validates,
    deduplicates and symmetrizes the edge list.
    """

    num_nodes: int
    adjacency: tuple[tuple[int, ...], ...]
    degrees: tuple[int, ...] = field(compare=False)

    @property
    def num_edges(self) -> int:
        return sum(self.degrees) // 2

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, nbrs in enumerate(self.adjacency) for v in nbrs if u < v]

    @cached_property
    def _dense(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for u, nbrs in enumerate(self.adjacency):
            a[u, list(nbrs)] = 1.0
        a.setflags(write=False)
        return a

    def adjacency_matrix(self) -> np.ndarray:
        """Dense float64 adjacency matrix (read-only view)."""
        return self._dense

    def degree_vector(self) -> np.ndarray:
        return np.asarray(self.degrees, dtype=float)

    def permuted(self, perm) -> "Graph":
        """Relabel node ``v`` as ``perm[v]``."""
        perm = list(perm)
        return build_graph(self.num_nodes, [(perm[u], perm[v]) for u, v in self.edges])

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return True
        return UNREACHABLE not in bfs_distances(self, 0)


def build_graph(num_nodes: int, edge_list) -> Graph:
    """Validate and symmetrize ``edge_list`` into a :class:`Graph`."""
    if num_nodes < 0:
        raise InvalidParams(f"num_nodes must be >= 0, got {num_nodes}")
    nbrs: list[set[int]] = [set() for _ in range(num_nodes)]
    for e in edge_list:
        u, v = (int(x) for x in e)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise InvalidEdge(f"edge ({u}, {v}) has an endpoint outside [0, {num_nodes})")
        if u == v:
            raise InvalidEdge(f"self-loop at node {u}")
        nbrs[u].add(v)
        nbrs[v].add(u)
    adjacency = tuple(tuple(sorted(s)) for s in nbrs)
    return Graph(num_nodes, adjacency, tuple(len(s) for s in adjacency))


def bfs_distances(g: Graph, source: int) -> np.ndarray:
    """Hop distances from ``source``; unreachable nodes hold :data:`UNREACHABLE`."""
    if not 0 <= source < g.num_nodes:
        raise InvalidParams(f"source {source} out of range for {g.num_nodes} nodes")
    dist = np.full(g.num_nodes, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in g.adjacency[u]:
            if dist[w] == UNREACHABLE:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def all_pairs_distances(g: Graph) -> np.ndarray:
    return np.stack([bfs_distances(g, s) for s in range(g.num_nodes)]) if g.num_nodes else np.zeros((0, 0), int)


# --------------------------------------------------------------------------
# Synthetic families
# --------------------------------------------------------------------------


class Family(str, enum.Enum):
    LINE = "line"
    LADDER = "ladder"
    GRID = "grid"
    RANDOM_TREE = "random_tree"
    CATERPILLAR = "caterpillar"
    LOBSTER = "lobster"
    CYCLE = "cycle"
    REGULAR_TREE = "regular_tree"
    ERDOS_RENYI = "erdos_renyi"


#: Parameter that ``gen-data --sizes`` varies for each family.
FAMILY_SIZE_KEY = {
    Family.LINE: "n",
    Family.LADDER: "n",
    Family.GRID: "cols",
    Family.RANDOM_TREE: "n",
    Family.CATERPILLAR: "n",
    Family.LOBSTER: "n",
    Family.CYCLE: "n",
    Family.REGULAR_TREE: "r",
    Family.ERDOS_RENYI: "n",
}

#: Smallest valid parameter set per family; used by exhaustive tests.
FAMILY_MINIMAL = {
    Family.LINE: {"n": 1},
    Family.LADDER: {"n": 1},
    Family.GRID: {"rows": 1, "cols": 1},
    Family.RANDOM_TREE: {"n": 1},
    Family.CATERPILLAR: {"n": 1},
    Family.LOBSTER: {"n": 1},
    Family.CYCLE: {"n": 3},
    Family.REGULAR_TREE: {"d": 2, "r": 1},
    Family.ERDOS_RENYI: {"n": 1, "p": 0.5},
}


def _need(params, key, minimum=1):
    if key not in params:
        raise InvalidParams(f"missing parameter {key!r}")
    value = int(params[key])
    if value < minimum:
        raise InvalidParams(f"{key} must be >= {minimum}, got {value}")
    return value


def _path_edges(nodes):
    return list(zip(nodes[:-1], nodes[1:]))


def _random_tree_edges(n, rng):
    # Decode a uniformly random Pruefer sequence.
    if n <= 1:
        return []
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2).tolist()
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = next(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, x))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = (i for i in range(n) if degree[i] == 1)
    edges.append((u, v))
    return edges


def _caterpillar(n, max_legs, depth2, p_second, rng):
    edges = _path_edges(list(range(n)))
    next_id = n
    for spine in range(n):
        for _ in range(int(rng.integers(0, max_legs + 1))):
            leg = next_id
            next_id += 1
            edges.append((spine, leg))
            if depth2 and rng.random() < p_second:
                edges.append((leg, next_id))
                next_id += 1
    return next_id, edges


def generate_family(family, params: dict | None = None, seed: int = 0) -> Graph:
    """Generate one graph of ``family``; deterministic given ``(params, seed)``.

    Parameters by family: line/cycle/random_tree ``n``; ladder ``n`` rungs;
    grid ``rows``, ``cols``; caterpillar ``n`` spine nodes and ``max_legs``
    (default 2); lobster additionally ``p_second`` (default 0.5); regular_tree
    branching ``d`` and depth ``r``; erdos_renyi ``n``, ``p``.
    """
    family = Family(family)
    params = dict(params or {})
    rng = np.random.default_rng(seed)

    if family is Family.LINE:
        n = _need(params, "n")
        return build_graph(n, _path_edges(list(range(n))))
    if family is Family.CYCLE:
        n = _need(params, "n", 3)
        return build_graph(n, _path_edges(list(range(n))) + [(n - 1, 0)])
    if family is Family.LADDER:
        n = _need(params, "n")
        edges = _path_edges(list(range(n))) + _path_edges(list(range(n, 2 * n)))
        edges += [(i, n + i) for i in range(n)]
        return build_graph(2 * n, edges)
    if family is Family.GRID:
        rows, cols = _need(params, "rows"), _need(params, "cols")
        idx = lambda r, c: r * cols + c  # noqa: E731
        edges = [(idx(r, c), idx(r, c + 1)) for r in range(rows) for c in range(cols - 1)]
        edges += [(idx(r, c), idx(r + 1, c)) for r in range(rows - 1) for c in range(cols)]
        return build_graph(rows * cols, edges)
    if family is Family.RANDOM_TREE:
        n = _need(params, "n")
        return build_graph(n, _random_tree_edges(n, rng))
    if family in (Family.CATERPILLAR, Family.LOBSTER):
        n = _need(params, "n")
        max_legs = int(params.get("max_legs", 2))
        if max_legs < 0:
            raise InvalidParams("max_legs must be >= 0")
        p_second = float(params.get("p_second", 0.5))
        if not 0.0 <= p_second <= 1.0:
            raise InvalidParams("p_second must lie in [0, 1]")
        total, edges = _caterpillar(n, max_legs, family is Family.LOBSTER, p_second, rng)
        return build_graph(total, edges)
    if family is Family.REGULAR_TREE:
        d = _need(params, "d", 2)
        r = _need(params, "r", 0)
        edges = []
        frontier, next_id = [0], 1
        for depth in range(r):
            new_frontier = []
            for parent in frontier:
                for _ in range(d if depth == 0 else d - 1):
                    edges.append((parent, next_id))
                    new_frontier.append(next_id)
                    next_id += 1
            frontier = new_frontier
        return build_graph(next_id, edges)
    if family is Family.ERDOS_RENYI:
        n = _need(params, "n")
        p = float(params.get("p", 0.5))
        if not 0.0 <= p <= 1.0:
            raise InvalidParams("p must lie in [0, 1]")
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p
        return build_graph(n, zip(iu[keep].tolist(), ju[keep].tolist()))
    raise InvalidParams(f"unknown family {family}")  # pragma: no cover


# --------------------------------------------------------------------------
# Tasks
# --------------------------------------------------------------------------


class Task(str, enum.Enum):
    DIAMETER = "diam"
    ECCENTRICITY = "ecc"
    SSSP = "sssp"

    @property
    def graph_level(self) -> bool:
        return self is Task.DIAMETER


def eccentricities(g: Graph) -> np.ndarray:
    dist = all_pairs_distances(g)
    if (dist == UNREACHABLE).any():
        raise DisconnectedGraph("eccentricity is undefined on a disconnected graph")
    return dist.max(axis=1)


def task_labels(g: Graph, task, source: int | None = None):
    """Exact targets: per-node array for ecc/sssp, a float for diam.

    SSSP on a disconnected graph keeps the :data:`UNREACHABLE` sentinel.
    """
    task = Task(task)
    if task is Task.SSSP:
        if source is None:
            raise InvalidParams("sssp needs a source node")
        return bfs_distances(g, source).astype(float)
    ecc = eccentricities(g).astype(float)
    if task is Task.ECCENTRICITY:
        return ecc
    return float(ecc.max())


@dataclass
class LabeledGraph:
    """A graph with node features and targets for one task.

    ``features`` has two channels: a random scalar and the SSSP source
    indicator (all zeros for other tasks).
    """

    graph: Graph
    features: np.ndarray
    targets: np.ndarray | float
    task: Task
    source: int | None = None

    def __post_init__(self):
        self.task = Task(self.task)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.graph.num_nodes:
            raise InvalidParams("features must be an n x d_in matrix")
        if self.task.graph_level:
            self.targets = float(self.targets)
        else:
            self.targets = np.asarray(self.targets, dtype=float)
            if self.targets.shape != (self.graph.num_nodes,):
                raise InvalidParams("node-level targets must have length n")

    @property
    def target_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.targets, dtype=float))


def random_features(n: int, rng, distribution: str = "uniform") -> np.ndarray:
    if distribution == "uniform":
        return rng.random(n)
    if distribution == "normal":
        return rng.standard_normal(n)
    if distribution == "constant":
        return np.ones(n)
    raise InvalidParams(f"unknown feature distribution {distribution!r}")


def make_labeled(g: Graph, task, seed: int = 0, *, source: int | None = None,
                 feature_dist: str = "uniform") -> LabeledGraph:
    """Attach random scalar features, the source channel and exact targets."""
    task = Task(task)
    rng = np.random.default_rng(seed)
    x = np.zeros((g.num_nodes, 2))
    x[:, 0] = random_features(g.num_nodes, rng, feature_dist)
    if task is Task.SSSP:
        if source is None:
            source = int(rng.integers(0, g.num_nodes))
        x[source, 1] = 1.0
    else:
        source = None
    return LabeledGraph(g, x, task_labels(g, task, source), task, source)
