import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph
from graphbackdoor.graph import (UNLABELED, AttributedGraph, GraphError, NodeSet, Trigger,
                                 attach_trigger, attach_triggers, cosine_similarity, edge_cosine,
                                 mean_aggregator, normalized_adjacency)


def path3():
    return AttributedGraph.from_edges(3, [(0, 1), (1, 2)], np.eye(3), [0, 1, 0], 2)


def test_normalized_adjacency_path_closed_form():
    A = normalized_adjacency(path3()).toarray()
    d = np.array([2.0, 3.0, 2.0])
    want = (np.eye(3) + np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])) / np.sqrt(np.outer(d, d))
    np.testing.assert_allclose(A, want, atol=1e-15)


def test_isolated_node_gets_unit_self_loop():
    g = AttributedGraph.from_edges(2, [], np.ones((2, 2)))
    np.testing.assert_array_equal(normalized_adjacency(g).toarray(), np.eye(2))


@pytest.mark.parametrize("edges, msg", [
    ([(0, 0)], "self-loop"),
    ([(0, 1), (1, 0)], "duplicate"),
    ([(0, 5)], "out of range"),
])
def test_from_edges_rejects_bad_edges(edges, msg):
    with pytest.raises(GraphError, match=msg):
        AttributedGraph.from_edges(3, edges, np.zeros((3, 2)))


def test_from_edges_rejects_bad_labels_and_rows():
    with pytest.raises(GraphError):
        AttributedGraph.from_edges(3, [], np.zeros((2, 2)))
    with pytest.raises(GraphError, match="label"):
        AttributedGraph.from_edges(2, [], np.zeros((2, 2)), [0, 5], 2)


def test_graph_arrays_are_read_only_and_caller_untouched():
    X = np.zeros((2, 2))
    g = AttributedGraph.from_edges(2, [(0, 1)], X)
    assert X.flags.writeable
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


def test_cosine_cases():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([0, 0], [1, 2]) == 0.0
    with pytest.raises(GraphError):
        cosine_similarity([1, 2], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_bounded_and_symmetric(a, b):
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == cosine_similarity(b, a)


def test_edge_cosine_matches_scalar(rng):
    g = random_graph(rng, 10, 0.4)
    E = g.edge_array()
    vec = edge_cosine(g.features, E)
    assert np.allclose(vec, [cosine_similarity(g.features[u], g.features[v]) for u, v in E])


def test_attach_trigger_counts():
    g = path3()
    trig = Trigger(np.ones((3, 3)), np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], float))
    g2, es = attach_trigger(g, 1, trig)
    assert g2.num_nodes == 6 and g2.num_edges == 2 + 1 + 2
    assert es[0] == (1, 3)
    assert g2.labels[3:].tolist() == [UNLABELED] * 3
    np.testing.assert_array_equal(g2.features[3:], trig.features)


def test_attach_two_triggers_are_disjoint():
    g = path3()
    trig = Trigger(np.ones((2, 3)), np.array([[0, 1], [1, 0]], float))
    g2, sets = attach_triggers(g, [0, 2], [trig, trig])
    crossing = [(u, v) for u, v in g2.edge_array() if (u < 3) != (v < 3)]
    assert sorted(crossing) == [(0, 3), (2, 5)]
    assert {u for es in sets for e in es for u in e if u >= 3} == {3, 4, 5, 6}


def test_nodeset_dedup_and_range():
    assert tuple(NodeSet([3, 1, 3])) == (3, 1)
    with pytest.raises(GraphError):
        NodeSet([5], num_nodes=3)


def test_without_edges_and_induced_subgraph(rng):
    g = random_graph(rng, 12, 0.4)
    E = g.edge_array()
    g2 = g.without_edges(E[:3])
    assert g2.num_edges == g.num_edges - 3
    sub = g.induced_subgraph([0, 1, 2, 3])
    want = g.adjacency().toarray()[:4, :4]
    np.testing.assert_array_equal(sub.adjacency().toarray(), want)


def test_mean_aggregator_rows():
    M = mean_aggregator(path3()).toarray()
    np.testing.assert_allclose(M.sum(axis=1), [1, 1, 1])
    assert M[1, 0] == 0.5


def test_fingerprint_stable(rng):
    g = random_graph(rng, 6)
    g2 = AttributedGraph.from_edges(6, g.edge_array(), g.features, g.labels, g.num_classes)
    assert g.fingerprint() == g2.fingerprint()
