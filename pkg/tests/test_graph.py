import json

import numpy as np
import pytest

from pulsar_pd.graph import build_hand_graph, graph_to_json, partition_adjacency


@pytest.fixture(scope="module")
def graph():
    return build_hand_graph()


def test_counts(graph):
    assert graph.vertex_count == 21
    assert len(graph.natural_edges) == 20
    sizes = {k: len(v) for k, v in graph.augmented_edges.items()}
    assert sizes == {"type1": 4, "type2": 5, "type3": 1}
    assert len(graph.all_edges) == 30


def test_natural_edges_form_tree(graph):
    assert graph.parent_of[8] == 7 and graph.parent_of[5] == 0 and graph.parent_of[0] == 0
    for v in range(1, 21):
        assert tuple(sorted((v, graph.parent_of[v]))) in graph.natural_edges
    assert all(d >= 0 for d in graph.hop_distance())


def test_augmented_sets_disjoint(graph):
    groups = list(graph.augmented_edges.values())
    for i, a in enumerate(groups):
        assert not a & graph.natural_edges
        for b in groups[i + 1:]:
            assert not a & b
    assert graph.augmented_edges["type3"] == {(4, 8)}
    assert (16, 17) in graph.augmented_edges["type1"]
    assert not any(20 in e for e in graph.augmented_edges["type1"])


def test_left_hand_shares_topology(graph):
    left = build_hand_graph("left")
    assert left.natural_edges == graph.natural_edges
    assert left.augmented_edges == graph.augmented_edges
    with pytest.raises(ValueError):
        build_hand_graph("both")


def test_partition(graph):
    adj = partition_adjacency(graph)
    a = adj.matrices
    assert a.shape == (3, 21, 21)
    np.testing.assert_array_equal(a[0], np.eye(21))
    assert np.count_nonzero(a) == 81
    assert a[2, 0, 5] > 0 and a[1, 5, 0] > 0
    assert a[1, 0, 5] == 0 and a[2, 5, 0] == 0
    rows = a.sum(axis=2)
    assert np.all((np.abs(rows - 1) < 1e-12) | (np.abs(rows) < 1e-12))
    assert np.all(a >= 0)


def test_support_union_is_graph_plus_self_loops(graph):
    support = {(i, j) for i, j in zip(*np.nonzero(partition_adjacency(graph).matrices.sum(0)))}
    expected = {(v, v) for v in range(21)}
    for i, j in graph.all_edges:
        expected |= {(i, j), (j, i)}
    assert support == expected


def test_uniform_and_unknown_strategy(graph):
    assert partition_adjacency(graph, "uniform").num_subsets == 1
    with pytest.raises(ValueError):
        partition_adjacency(graph, "distance")


def test_json_dump(graph):
    doc = json.loads(graph_to_json(graph, partition_adjacency(graph)))
    assert len(doc["vertices"]) == 21 and len(doc["natural_edges"]) == 20
    assert np.asarray(doc["partition"]["matrices"]).shape == (3, 21, 21)
    assert graph_to_json(graph) == graph_to_json(build_hand_graph())
