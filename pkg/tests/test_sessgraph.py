"""Session-graph construction, anchor neighborhoods, and node-level encodings."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posrec import posenc, sessgraph
from posrec.sessgraph import (
    GraphError,
    Session,
    assemble_node_pe,
    attach_anchors,
    build_session_graph,
    edges_tsv,
)


def by_items(graph):
    return sorted((graph.items[s], graph.items[t], w) for s, t, w in graph.edges)


class TestSessionType:
    def test_rejects_empty(self):
        with pytest.raises(GraphError):
            Session(items=[])

    def test_rejects_decreasing_timestamps(self):
        with pytest.raises(GraphError):
            Session(items=[1, 2], timestamps=[5.0, 4.0])

    def test_rejects_misaligned_timestamps(self):
        with pytest.raises(GraphError):
            Session(items=[1, 2], timestamps=[5.0])


class TestBuild:
    def test_revisit_pattern(self):
        g = build_session_graph(Session([7, 8, 9, 8]))
        assert g.items == [7, 8, 9]
        assert by_items(g) == [(7, 8, 1.0), (8, 9, 1.0), (9, 8, 1.0)]

    def test_duplicate_transition_accumulates(self):
        g = build_session_graph(Session([1, 2, 1, 2]))
        assert by_items(g) == [(1, 2, 2.0), (2, 1, 1.0)]

    def test_single_item(self):
        g = build_session_graph(Session([42]))
        assert g.n == 1 and g.edges == []
        assert g.first_node == g.last_node == 0

    def test_occurrences_and_endpoints(self):
        g = build_session_graph(Session([5, 3, 5, 9]))
        assert g.occurrences == {0: [0, 2], 1: [1], 2: [3]}
        assert g.first_node == 0 and g.last_node == 2

    def test_relabeling_gives_isomorphic_graph(self):
        base = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3]
        mapping = {v: v * 100 + 7 for v in set(base)}
        g1 = build_session_graph(Session(base))
        g2 = build_session_graph(Session([mapping[v] for v in base]))
        relabeled = sorted((mapping[a], mapping[b], w) for a, b, w in by_items(g1))
        assert relabeled == by_items(g2)


class TestAnchors:
    def test_three_item_path(self):
        g = attach_anchors(build_session_graph(Session([10, 11, 12])))
        # last item: inbound anchor is the first item two hops away,
        # outbound anchor is itself with the self-loop weight
        assert g.anchor_in[2] == [(0, 2.0)]
        assert g.anchor_out[2] == [(2, 1.0)]
        assert g.anchor_in[1] == [(0, 1.0)]
        assert g.anchor_out[1] == [(2, 1.0)]

    def test_repeated_item_joins_both_sides(self):
        g = attach_anchors(build_session_graph(Session([1, 2, 1])))
        assert (0, 1.0) in g.anchor_in[1]
        assert (0, 1.0) in g.anchor_out[1]

    def test_first_also_repeated_deduplicated(self):
        g = attach_anchors(build_session_graph(Session([1, 2, 1, 3])))
        anchors = [a for a, _ in g.anchor_in[1]]
        assert anchors.count(0) == 1

    def test_anchor_count_bound(self):
        items = [1, 2, 3, 2, 4, 1, 5]
        g = attach_anchors(build_session_graph(Session(items)))
        repeats = sum(1 for v in range(g.n) if len(g.occurrences[v]) >= 2)
        for v in range(g.n):
            assert len(g.anchor_in[v]) + len(g.anchor_out[v]) <= 2 * (2 + repeats)
            assert all(w >= 1 for _, w in g.anchor_in[v] + g.anchor_out[v])

    def test_path_distances_equal_index_difference(self):
        items = [4, 8, 15, 16, 23, 42]
        g = attach_anchors(build_session_graph(Session(items)))
        for v in range(g.n):
            for a, w in g.anchor_in[v]:
                expected = abs(v - a) if v != a else 1
                assert w == expected
            for a, w in g.anchor_out[v]:
                expected = abs(v - a) if v != a else 1
                assert w == expected

    def test_inverse_weight_mode(self):
        g = attach_anchors(build_session_graph(Session([10, 11, 12])), weight_mode="inverse")
        assert g.anchor_in[2] == [(0, 0.5)]
        assert g.anchor_out[2] == [(2, 1.0)]

    def test_bad_weight_mode(self):
        with pytest.raises(GraphError):
            attach_anchors(build_session_graph(Session([1, 2])), weight_mode="nope")


class TestNodePe:
    def test_unique_items_rows_equal_plain_encoding(self):
        scheme = posenc.make_scheme("DPE", 8, 10)
        g = build_session_graph(Session([4, 5, 6]))
        rows = assemble_node_pe(g, scheme)
        for v in range(3):
            np.testing.assert_array_equal(rows[v], posenc.encode(scheme, v, 3))

    def test_repeat_takes_earliest_forward_latest_backward(self):
        scheme = posenc.make_scheme("DPE", 8, 10)
        g = build_session_graph(Session([1, 2, 1]))
        rows = assemble_node_pe(g, scheme)
        np.testing.assert_array_equal(rows[0][:4], posenc.encode(scheme, 0, 3)[:4])
        np.testing.assert_array_equal(rows[0][4:], posenc.encode(scheme, 2, 3)[4:])

    def test_zero_scheme_gives_zero_matrix(self):
        g = build_session_graph(Session([1, 2, 3, 2]))
        rows = assemble_node_pe(g, posenc.make_scheme("NONE", 8, 10))
        np.testing.assert_array_equal(rows, np.zeros((3, 8)))

    def test_row_count_matches_nodes_and_rows_finite(self):
        scheme = posenc.make_scheme("LDPE", 8, 12, seed=2)
        g = build_session_graph(Session([5, 1, 5, 2, 1]))
        rows = assemble_node_pe(g, scheme)
        assert rows.shape == (g.n, 8)
        assert np.isfinite(rows).all()

    def test_relative_kind_rejected(self):
        g = build_session_graph(Session([1, 2]))
        with pytest.raises(GraphError):
            assemble_node_pe(g, posenc.make_scheme("LRPE", 8, 10))


class TestDump:
    def test_tsv_kinds_and_weights(self):
        g = attach_anchors(build_session_graph(Session([1, 2, 2])))
        text = edges_tsv(g)
        lines = text.strip().split("\n")
        assert "1\t2\t1\tnormal" in lines
        assert "2\t2\t1\tnormal" in lines
        assert any(line.endswith("anchor_in") for line in lines)
        assert any(line.endswith("anchor_out") for line in lines)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
@settings(max_examples=120, deadline=None)
def test_edge_weights_sum_to_transition_count(items):
    g = build_session_graph(Session(items))
    assert sum(w for _, _, w in g.edges) == len(items) - 1
    assert g.n <= len(items)
    assert sorted(p for positions in g.occurrences.values() for p in positions) == list(range(len(items)))


@given(st.lists(st.integers(0, 6), min_size=1, max_size=10))
@settings(max_examples=80, deadline=None)
def test_anchor_weights_are_bfs_distances(items):
    g = attach_anchors(build_session_graph(Session(items)))
    # brute-force all-pairs shortest paths on the undirected projection
    n = g.n
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for s, t, _ in g.edges:
        if s != t:
            dist[s, t] = dist[t, s] = 1.0
    for k in range(n):
        for i in range(n):
            for j in range(n):
                dist[i, j] = min(dist[i, j], dist[i, k] + dist[k, j])
    for v in range(n):
        for a, w in g.anchor_in[v] + g.anchor_out[v]:
            expected = 1.0 if a == v else dist[v, a]
            assert w == expected
