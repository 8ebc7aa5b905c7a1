"""Graphs, deterministic benchmark generators and brute-force graph oracles."""

from __future__ import annotations

import enum
import itertools
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, ParseError

UNREACHABLE = -1


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with per-node features.

    ``adjacency[i]`` is the strictly increasing tuple of neighbours of ``i``.
    """

    n: int
    adjacency: tuple[tuple[int, ...], ...]
    features: np.ndarray
    node_labels: tuple[int, ...] | None = None
    graph_label: int | None = None

    def __post_init__(self):
        if len(self.adjacency) != self.n:
            raise InvalidArgument("adjacency length differs from n")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.n:
            raise InvalidArgument(f"features must have shape (n, d_in), got {feats.shape}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        for i, nbrs in enumerate(self.adjacency):
            if any(b <= a for a, b in zip(nbrs, nbrs[1:])):
                raise InvalidArgument(f"neighbours of {i} not strictly sorted")
            for j in nbrs:
                if j == i:
                    raise InvalidArgument(f"self-loop at {i}")
                if not 0 <= j < self.n or i not in self.adjacency[j]:
                    raise InvalidArgument(f"asymmetric edge {i}-{j}")
        if self.node_labels is not None and len(self.node_labels) != self.n:
            raise InvalidArgument("node_labels length differs from n")

    @classmethod
    def from_edges(cls, n, edges, features=None, node_labels=None, graph_label=None):
        nbrs = [set() for _ in range(n)]
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise InvalidArgument(f"self-loop at {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise InvalidArgument(f"edge ({u}, {v}) out of range for n={n}")
            nbrs[u].add(v)
            nbrs[v].add(u)
        if features is None:
            features = np.ones((n, 1))
        labels = None if node_labels is None else tuple(int(x) for x in node_labels)
        return cls(n, tuple(tuple(sorted(s)) for s in nbrs), np.asarray(features, dtype=np.float64),
                   labels, graph_label)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in self.adjacency[i] if i < j]

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adjacency[u]

    def with_labels(self, node_labels=None, graph_label=None) -> "Graph":
        return Graph(self.n, self.adjacency, self.features,
                     None if node_labels is None else tuple(int(x) for x in node_labels),
                     graph_label)

    def with_features(self, features) -> "Graph":
        return Graph(self.n, self.adjacency, np.asarray(features, dtype=np.float64),
                     self.node_labels, self.graph_label)

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        inv = np.argsort(perm)
        edges = [(perm[u], perm[v]) for u, v in self.edges()]
        labels = None if self.node_labels is None else [self.node_labels[j] for j in inv]
        return Graph.from_edges(self.n, edges, self.features[inv], labels, self.graph_label)

    def same_structure(self, other: "Graph") -> bool:
        return (self.n == other.n and self.adjacency == other.adjacency
                and np.array_equal(self.features, other.features))


class TaskKind(str, enum.Enum):
    NODE = "node_classification"
    GRAPH = "graph_classification"
    MULTI_START_NODE = "multi_start_node_classification"


@dataclass(frozen=True)
class DatasetInstance:
    graph: Graph
    task_kind: TaskKind
    start_marks: tuple[int, ...] | None = None
    # per-node label vectors for multi-start parity (one column per start)
    multi_labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        node_level = self.task_kind in (TaskKind.NODE, TaskKind.MULTI_START_NODE)
        if node_level and self.graph.node_labels is None and self.multi_labels is None:
            raise InvalidArgument("node-level task requires node labels")
        if not node_level and self.graph.graph_label is None:
            raise InvalidArgument("graph-level task requires a graph label")


# ---------------------------------------------------------------- oracles

def bfs_distances(g: Graph, start: int) -> list[int]:
    """Unweighted shortest-path distances; ``UNREACHABLE`` (-1) if unreachable."""
    if not 0 <= start < g.n:
        raise InvalidArgument(f"start {start} out of range for n={g.n}")
    dist = [UNREACHABLE] * g.n
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in g.adjacency[u]:
            if dist[v] == UNREACHABLE:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def is_connected(g: Graph) -> bool:
    return g.n == 0 or UNREACHABLE not in bfs_distances(g, 0)


def component_sizes(g: Graph) -> list[int]:
    seen = [False] * g.n
    sizes = []
    for s in range(g.n):
        if seen[s]:
            continue
        d = bfs_distances(g, s)
        comp = [i for i, x in enumerate(d) if x != UNREACHABLE]
        for i in comp:
            seen[i] = True
        sizes.append(len(comp))
    return sorted(sizes)


def triangle_counts(g: Graph) -> list[int]:
    """Triangles through each node, counted over adjacent neighbour pairs."""
    return [sum(1 for a, b in itertools.combinations(g.adjacency[v], 2) if g.has_edge(a, b))
            for v in range(g.n)]


def local_clustering(g: Graph) -> list[Fraction]:
    out = []
    for v, t in enumerate(triangle_counts(g)):
        d = g.degree(v)
        out.append(Fraction(0) if d < 2 else Fraction(t, d * (d - 1) // 2))
    return out


def color_refinement(graphs: Sequence[Graph], aggregator: str = "multiset",
                     max_rounds: int | None = None) -> list[list[int]]:
    """Joint 1-WL colour refinement over ``graphs`` until the partition is stable.

    ``aggregator`` selects how neighbour colours are combined: ``multiset``
    (sum-like, classic 1-WL), ``set`` (max-like) or ``distribution`` (mean-like).
    Colours are comparable across the graphs passed in one call.
    """
    if aggregator not in ("multiset", "set", "distribution"):
        raise InvalidArgument(f"unknown aggregator {aggregator!r}")
    init = [tuple(np.round(row, 12)) for g in graphs for row in g.features]
    palette = {c: i for i, c in enumerate(sorted(set(init)))}
    colors = [[palette[tuple(np.round(row, 12))] for row in g.features] for g in graphs]
    n_classes = len(palette)
    rounds = 0
    while max_rounds is None or rounds < max_rounds:
        sigs = []
        for g, col in zip(graphs, colors):
            gs = []
            for v in range(g.n):
                nb = [col[u] for u in g.adjacency[v]]
                if aggregator == "multiset":
                    agg = tuple(sorted(nb))
                elif aggregator == "set":
                    agg = tuple(sorted(set(nb)))
                else:
                    cnt = Counter(nb)
                    agg = tuple(sorted((c, Fraction(k, len(nb))) for c, k in cnt.items()))
                gs.append((col[v], agg))
            sigs.append(gs)
        palette = {s: i for i, s in enumerate(sorted({s for gs in sigs for s in gs}))}
        new = [[palette[s] for s in gs] for gs in sigs]
        rounds += 1
        if len(palette) == n_classes:
            return new
        colors, n_classes = new, len(palette)
    return colors


def wl_indistinguishable(g1: Graph, g2: Graph, aggregator: str = "multiset") -> bool:
    """Whether refinement plus the matching graph readout (sum / max / mean) ties."""
    c1, c2 = color_refinement([g1, g2], aggregator)
    if aggregator == "multiset":
        return sorted(c1) == sorted(c2)
    if aggregator == "set":
        return set(c1) == set(c2)
    hist = lambda c: {k: Fraction(v, len(c)) for k, v in Counter(c).items()}
    return hist(c1) == hist(c2)


# ------------------------------------------------------------- generators

def _rng(seed) -> random.Random:
    return random.Random(seed)


def generate_spanning_tree_graph(n: int, seed=0) -> Graph:
    """Random spanning tree plus ``n // 5`` extra edges among non-tree pairs."""
    if n < 2:
        raise InvalidArgument(f"n must be >= 2, got {n}")
    rng = _rng(seed)
    order = list(range(n))
    rng.shuffle(order)
    tree = set()
    for i in range(1, n):
        u, v = order[i], order[rng.randrange(i)]
        tree.add((min(u, v), max(u, v)))
    candidates = [p for p in itertools.combinations(range(n), 2) if p not in tree]
    extra = rng.sample(candidates, n // 5)
    return Graph.from_edges(n, sorted(tree) + sorted(extra))


def cycle_graph(n: int, features=None) -> Graph:
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)], features)


def generate_cycle_pair() -> tuple[Graph, Graph]:
    """Two disjoint 4-cycles (label 0) versus one 8-cycle (label 1)."""
    two = [(i, (i + 1) % 4) for i in range(4)] + [(4 + i, 4 + (i + 1) % 4) for i in range(4)]
    a = Graph.from_edges(8, two, node_labels=[0] * 8)
    b = cycle_graph(8).with_labels(node_labels=[1] * 8)
    return a, b


def skip_cycle_graph(n: int) -> Graph:
    skip = n // 2 - 1
    edges = [(i, (i + 1) % n) for i in range(n)] + [(i, (i + skip) % n) for i in range(n)]
    return Graph.from_edges(n, edges)


def generate_skip_cycles(lengths: Sequence[int]) -> list[DatasetInstance]:
    """One regular graph per class: an n-cycle with chords of length n//2 - 1."""
    out = []
    for label, n in enumerate(lengths):
        if n < 9:
            raise InvalidArgument(f"skip-cycle length must be >= 9, got {n}")
        out.append(DatasetInstance(skip_cycle_graph(n).with_labels(graph_label=label),
                                   TaskKind.GRAPH))
    return out


def bucket_triangles(count: int) -> int:
    return min(count, 3)


def bucket_lcc(c: Fraction) -> int:
    if c == 0:
        return 0
    if c <= Fraction(1, 3):
        return 1
    if c <= Fraction(2, 3):
        return 2
    return 3


def random_connected_graph(n: int, mean_degree: float, rng: random.Random) -> Graph:
    p = min(1.0, mean_degree / max(n - 1, 1))
    while True:
        edges = [e for e in itertools.combinations(range(n), 2) if rng.random() < p]
        g = Graph.from_edges(n, edges)
        if is_connected(g):
            return g


def generate_triangle_lcc_data(n_graphs: int, n: int, seed=0,
                               target: str = "triangles") -> list[DatasetInstance]:
    """Connected Erdos-Renyi graphs (mean degree ~4) with oracle node labels."""
    if n < 4:
        raise InvalidArgument(f"n must be >= 4, got {n}")
    if target not in ("triangles", "lcc"):
        raise InvalidArgument(f"unknown target {target!r}")
    rng = _rng(seed)
    out = []
    for _ in range(n_graphs):
        g = random_connected_graph(n, 4.0, rng)
        if target == "triangles":
            labels = [bucket_triangles(t) for t in triangle_counts(g)]
        else:
            labels = [bucket_lcc(c) for c in local_clustering(g)]
        out.append(DatasetInstance(g.with_labels(node_labels=labels), TaskKind.NODE))
    return out


def star_graph(k: int) -> Graph:
    """Centre 0 joined to outer nodes 1..k, with the outer nodes forming a clique."""
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    edges = [(0, i) for i in range(1, k + 1)]
    edges += list(itertools.combinations(range(1, k + 1), 2))
    return Graph.from_edges(k + 1, edges)


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


# ------------------------------------------------------------- text format

def format_graph(g: Graph) -> str:
    lines = [f"{g.n} {g.d_in}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in g.features]
    lines += [f"{u} {v}" for u, v in g.edges()]
    return "\n".join(lines) + "\n"


def write_graph(g: Graph, path) -> None:
    Path(path).write_text(format_graph(g))


def _parse_graph_lines(lines: list[tuple[int, str]], path) -> Graph:
    if not lines:
        raise ParseError("empty graph block", path)
    lineno, header = lines[0]
    try:
        n, d = (int(x) for x in header.split())
    except ValueError:
        raise ParseError(f"bad header {header!r}, expected 'n d_in'", path, lineno) from None
    if len(lines) < 1 + n:
        raise ParseError(f"expected {n} feature lines", path, lineno)
    feats = []
    for ln, text in lines[1:1 + n]:
        row = text.split()
        if len(row) != d:
            raise ParseError(f"expected {d} feature values, got {len(row)}", path, ln)
        try:
            feats.append([float(x) for x in row])
        except ValueError:
            raise ParseError(f"bad feature line {text!r}", path, ln) from None
    edges = []
    for ln, text in lines[1 + n:]:
        try:
            u, v = (int(x) for x in text.split())
        except ValueError:
            raise ParseError(f"bad edge line {text!r}", path, ln) from None
        edges.append((u, v))
    try:
        return Graph.from_edges(n, edges, np.array(feats, dtype=np.float64).reshape(n, d))
    except InvalidArgument as exc:
        raise ParseError(str(exc), path) from None


def parse_graph(text: str, path=None) -> Graph:
    lines = [(i + 1, s.strip()) for i, s in enumerate(text.splitlines())
             if s.strip() and not s.lstrip().startswith("#")]
    return _parse_graph_lines(lines, path)


def read_graph(path) -> Graph:
    return parse_graph(Path(path).read_text(), path)


@dataclass(frozen=True)
class FixedConstruction:
    name: str
    graphs: tuple[Graph, ...]
    aggregator: str  # the refinement the pair is hard for
    note: str = ""


def parse_constructions(text: str, path=None) -> dict[str, FixedConstruction]:
    """Parse the hand-entered construction file.

    Blocks look like::

        @ name aggregator
        # note
        <graph text>
        labels node 0 0 1 ...   (or: labels graph 1)
        @ name aggregator       (second graph of the same construction)
        ...
    """
    blocks: list[tuple[str, str, list[tuple[int, str]], list[str]]] = []
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s:
            continue
        if s.startswith("@"):
            parts = s[1:].split()
            if len(parts) != 2:
                raise ParseError("expected '@ name aggregator'", path, i)
            blocks.append((parts[0], parts[1], [], []))
        elif s.startswith("#"):
            if blocks:
                blocks[-1][3].append(s.lstrip("# "))
        elif not blocks:
            raise ParseError("content before first '@' block", path, i)
        else:
            blocks[-1][2].append((i, s))
    grouped: dict[str, list] = {}
    for name, agg, lines, notes in blocks:
        if not lines or not lines[-1][1].startswith("labels"):
            raise ParseError(f"block {name!r} lacks a trailing labels line", path)
        ln, label_line = lines[-1]
        g = _parse_graph_lines(lines[:-1], path)
        kind, *vals = label_line.split()[1:]
        if kind == "node":
            if len(vals) != g.n:
                raise ParseError(f"expected {g.n} node labels", path, ln)
            g = g.with_labels(node_labels=[int(v) for v in vals])
        elif kind == "graph" and len(vals) == 1:
            g = g.with_labels(graph_label=int(vals[0]))
        else:
            raise ParseError(f"bad labels line {label_line!r}", path, ln)
        entry = grouped.setdefault(name, [agg, [], []])
        entry[1].append(g)
        entry[2].extend(notes)
    return {k: FixedConstruction(k, tuple(v[1]), v[0], " ".join(v[2])) for k, v in grouped.items()}


def load_fixed_constructions(validate: bool = True) -> dict[str, FixedConstruction]:
    text = resources.files("asyncmp").joinpath("data/constructions.txt").read_text()
    out = parse_constructions(text, "constructions.txt")
    if validate:
        for c in out.values():
            a, b = c.graphs
            if not wl_indistinguishable(a, b, c.aggregator):
                raise InvalidArgument(f"construction {c.name!r} is separable by "
                                      f"{c.aggregator} refinement")
    return out
