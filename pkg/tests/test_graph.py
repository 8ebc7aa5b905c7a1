import itertools
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from asyncmp.errors import InvalidArgument, ParseError
from asyncmp.graph import (UNREACHABLE, DatasetInstance, Graph, TaskKind, bfs_distances,
                           bucket_triangles, color_refinement, component_sizes, cycle_graph,
                           generate_cycle_pair, generate_skip_cycles, generate_spanning_tree_graph,
                           generate_triangle_lcc_data, is_connected, load_fixed_constructions,
                           local_clustering, parse_constructions, parse_graph, path_graph,
                           format_graph, read_graph, star_graph, triangle_counts,
                           wl_indistinguishable, write_graph)


def floyd_warshall(g):
    inf = float("inf")
    d = [[0 if i == j else (1 if g.has_edge(i, j) else inf) for j in range(g.n)] for i in range(g.n)]
    for k in range(g.n):
        for i in range(g.n):
            for j in range(g.n):
                if d[i][k] + d[k][j] < d[i][j]:
                    d[i][j] = d[i][k] + d[k][j]
    return d


def brute_triangles(g):
    out = [0] * g.n
    for a, b, c in itertools.combinations(range(g.n), 3):
        if g.has_edge(a, b) and g.has_edge(b, c) and g.has_edge(a, c):
            for v in (a, b, c):
                out[v] += 1
    return out


class TestGraphType:
    def test_rejects_asymmetric_adjacency(self):
        with pytest.raises(InvalidArgument):
            Graph(2, ((1,), ()), np.ones((2, 1)))

    def test_rejects_self_loop(self):
        with pytest.raises(InvalidArgument):
            Graph.from_edges(2, [(0, 0)])

    def test_features_are_read_only(self):
        g = path_graph(3)
        with pytest.raises(ValueError):
            g.features[0, 0] = 5.0

    def test_relabel_preserves_structure(self):
        g = generate_spanning_tree_graph(8, 3)
        perm = [3, 1, 7, 0, 2, 6, 5, 4]
        h = g.relabel(perm)
        assert h.num_edges == g.num_edges
        for u, v in g.edges():
            assert h.has_edge(perm[u], perm[v])

    def test_dataset_instance_requires_labels(self):
        with pytest.raises(InvalidArgument):
            DatasetInstance(path_graph(3), TaskKind.NODE)
        with pytest.raises(InvalidArgument):
            DatasetInstance(path_graph(3), TaskKind.GRAPH)


class TestSpanningTree:
    def test_n10_has_11_edges(self):
        assert generate_spanning_tree_graph(10, 0).num_edges == 11

    def test_n2_single_edge(self):
        g = generate_spanning_tree_graph(2, 0)
        assert g.edges() == [(0, 1)]

    def test_n25_seed7(self):
        g = generate_spanning_tree_graph(25, 7)
        assert g.num_edges == 29
        assert UNREACHABLE not in bfs_distances(g, 0)

    def test_small_n_rejected(self):
        with pytest.raises(InvalidArgument):
            generate_spanning_tree_graph(1, 0)

    @given(st.integers(2, 40), st.integers(0, 10 ** 6))
    def test_connected_and_deterministic(self, n, seed):
        g = generate_spanning_tree_graph(n, seed)
        assert is_connected(g)
        assert g.num_edges == n - 1 + n // 5
        assert g.adjacency == generate_spanning_tree_graph(n, seed).adjacency


class TestCyclePair:
    def test_components(self):
        a, b = generate_cycle_pair()
        assert component_sizes(a) == [4, 4]
        assert component_sizes(b) == [8]
        for g in (a, b):
            assert g.n == 8 and g.num_edges == 8
            assert all(g.degree(v) == 2 for v in range(8))

    def test_single_stable_colour(self):
        a, b = generate_cycle_pair()
        ca, cb = color_refinement([a, b])
        assert set(ca) | set(cb) == {0}
        assert wl_indistinguishable(a, b)


class TestSkipCycles:
    def test_single_length(self):
        (inst,) = generate_skip_cycles([9])
        g = inst.graph
        skip = 9 // 2 - 1
        for i in range(9):
            assert g.has_edge(i, (i + 1) % 9)
            assert g.has_edge(i, (i + skip) % 9)
        assert inst.graph.graph_label == 0

    def test_regular_degree_four(self):
        for inst in generate_skip_cycles([9, 11, 12, 15]):
            assert {inst.graph.degree(v) for v in range(inst.graph.n)} == {4}

    def test_two_classes(self):
        a, b = generate_skip_cycles([9, 11])
        assert a.graph.graph_label != b.graph.graph_label

    def test_too_short(self):
        with pytest.raises(InvalidArgument):
            generate_skip_cycles([8])


class TestTrianglesLcc:
    def test_k4(self):
        k4 = Graph.from_edges(4, itertools.combinations(range(4), 2))
        assert triangle_counts(k4) == [3, 3, 3, 3]

    def test_c5(self):
        c5 = cycle_graph(5)
        assert triangle_counts(c5) == [0] * 5
        assert local_clustering(c5) == [Fraction(0)] * 5

    def test_labels_match_brute_force(self):
        for inst in generate_triangle_lcc_data(5, 8, seed=3):
            assert list(inst.graph.node_labels) == [bucket_triangles(t) for t in brute_triangles(inst.graph)]

    def test_small_n(self):
        with pytest.raises(InvalidArgument):
            generate_triangle_lcc_data(1, 3)


class TestBfs:
    def test_path(self):
        assert bfs_distances(path_graph(3), 0) == [0, 1, 2]

    def test_start_out_of_range(self):
        with pytest.raises(InvalidArgument):
            bfs_distances(path_graph(3), 3)

    def test_disconnected_marks_unreachable(self):
        g = Graph.from_edges(3, [(0, 1)])
        assert bfs_distances(g, 0) == [0, 1, UNREACHABLE]

    def test_matches_floyd_warshall(self):
        rng = random.Random(5)
        for _ in range(5):
            g = Graph.from_edges(12, [e for e in itertools.combinations(range(12), 2) if rng.random() < 0.25])
            fw = floyd_warshall(g)
            for s in range(g.n):
                want = [UNREACHABLE if x == float("inf") else int(x) for x in fw[s]]
                assert bfs_distances(g, s) == want


class TestStar:
    def test_k1(self):
        assert star_graph(1).edges() == [(0, 1)]

    def test_k3_is_k4(self):
        assert star_graph(3).num_edges == 6

    def test_k5(self):
        g = star_graph(5)
        assert g.n == 6 and g.num_edges == 15
        assert all(g.degree(v) == 5 for v in range(6))

    def test_k0(self):
        with pytest.raises(InvalidArgument):
            star_graph(0)


class TestTextFormat:
    def test_roundtrip(self, tmp_path):
        g = generate_spanning_tree_graph(7, 1).with_features(np.arange(14.0).reshape(7, 2) / 3)
        write_graph(g, tmp_path / "g.txt")
        assert read_graph(tmp_path / "g.txt").same_structure(g)

    def test_comments_ignored(self):
        g = parse_graph("# header\n2 1\n1\n1\n0 1\n")
        assert g.edges() == [(0, 1)]

    def test_bad_edge_reports_line(self):
        with pytest.raises(ParseError) as exc:
            parse_graph("2 1\n1\n1\n0 x\n", "f.txt")
        assert exc.value.line == 4

    def test_wrong_feature_width(self):
        with pytest.raises(ParseError):
            parse_graph("2 2\n1\n1 1\n")

    def test_format_is_stable(self):
        assert format_graph(path_graph(2)) == "2 1\n1.0\n1.0\n0 1\n"


class TestConstructions:
    def test_shipped_pairs_validate(self):
        cons = load_fixed_constructions()
        assert set(cons) == {"limits1", "limits2", "max", "mean"}
        for c in cons.values():
            assert len(c.graphs) == 2
            assert wl_indistinguishable(*c.graphs, aggregator=c.aggregator)

    def test_aggregator_specific_hardness(self):
        cons = load_fixed_constructions()
        # these two only defeat the weaker aggregator
        assert not wl_indistinguishable(*cons["max"].graphs, aggregator="multiset")
        assert not wl_indistinguishable(*cons["mean"].graphs, aggregator="multiset")

    def test_missing_labels_line(self):
        with pytest.raises(ParseError):
            parse_constructions("@ a multiset\n2 1\n1\n1\n0 1\n")
