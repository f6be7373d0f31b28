import itertools

import networkx as nx
import numpy as np
import pytest

from cvheat.events import EventTensor
from cvheat.graphs import (
    GraphConfig,
    SpatialGraph,
    aggregate_contour_graph,
    build_bundle,
    build_global_graph,
    concat_graphs,
    dump_bundle,
    filter_subgraphs,
    knn_edges,
    louvain_partition,
    modularity,
)


def _graph(n, edges):
    return SpatialGraph(np.zeros((n, 2)), np.zeros((n, 1)), edges)


def _frame_with_patches(h, w, cells, patch=8):
    data = np.zeros((2, h, w), dtype=np.float32)
    for r, c in cells:
        data[0, r * patch, c * patch] = 1
    return EventTensor(data, "frame")


# ---------------------------------------------------------------- global graph


def test_all_zero_frame_gives_empty_graph():
    g = build_global_graph(np.zeros((2, 16, 16)), 8, 8, 20.0)
    assert g.num_nodes == 0 and g.num_edges == 0


def test_edge_below_threshold():
    g = build_global_graph(_frame_with_patches(8, 16, [(0, 0), (0, 1)]), 8, 8, 10.0)
    assert g.edges.tolist() == [[0, 1]]


def test_edge_at_threshold_excluded():
    # centres 10 apart with 10-pixel patches
    data = np.zeros((2, 10, 20), dtype=np.float32)
    data[0, 0, 0] = data[1, 0, 10] = 1
    g = build_global_graph(data, 10, 10, 10.0)
    assert g.num_nodes == 2 and g.num_edges == 0


def test_node_features_are_flattened_patches():
    data = np.zeros((2, 8, 16), dtype=np.float32)
    data[1, 3, 10] = 5
    g = build_global_graph(data, 8, 8, 20.0)
    assert g.num_nodes == 1 and g.feat_dim == 2 * 8 * 8
    assert g.pos.tolist() == [[12.0, 4.0]]
    assert g.feat[0].reshape(2, 8, 8)[1, 3, 2] == 5 and g.feat.sum() == 5


def test_indivisible_frame_rejected():
    with pytest.raises(ValueError):
        build_global_graph(np.zeros((2, 10, 16)), 8, 8, 20.0)


def test_spatial_graph_validation():
    with pytest.raises(ValueError):
        _graph(2, [(0, 0)])
    with pytest.raises(ValueError):
        _graph(2, [(0, 2)])
    g = _graph(3, [(1, 0), (0, 1), (2, 1)])
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_concat_offsets_edges():
    g = concat_graphs([_graph(2, [(0, 1)]), _graph(3, [(1, 2)])])
    assert g.num_nodes == 5 and g.edges.tolist() == [[0, 1], [3, 4]]


# ---------------------------------------------------------------- Louvain oracles


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [{first}] + part
        for i in range(len(part)):
            yield part[:i] + [part[i] | {first}] + part[i + 1 :]


def _nx(n, edges):
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(map(tuple, edges))
    return g


def _brute_force_max(n, edges):
    g = _nx(n, edges)
    return max(nx.community.modularity(g, p) for p in _set_partitions(list(range(n))))


def _is_local_max(n, edges, partition, tol=1e-12):
    """No single node move (to a neighbour's community or to isolation) raises modularity."""
    g = _nx(n, edges)
    base = nx.community.modularity(g, partition)
    member = {v: ci for ci, s in enumerate(partition) for v in s}
    for v in range(n):
        targets = {member[u] for u in g.neighbors(v)} - {member[v]}
        options = [[s - {v} for s in partition] + [{v}]]
        for t in targets:
            options.append([(s | {v}) if ci == t else (s - {v}) for ci, s in enumerate(partition)])
        for opt in options:
            opt = [s for s in opt if s]
            if nx.community.modularity(g, opt) > base + tol:
                return False
    return True


def _random_graph(rng, n_max):
    n = int(rng.integers(1, n_max + 1))
    p = rng.uniform(0.05, 0.6)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return n, np.array(edges, dtype=np.int64).reshape(-1, 2)


def test_no_edges_gives_singletons():
    assert louvain_partition(_graph(3, [])) == [{0}, {1}, {2}]


def test_two_triangles_joined_by_bridge():
    edges = [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)]
    part = louvain_partition(_graph(6, edges))
    assert part == [{0, 1, 2}, {3, 4, 5}]
    assert abs(modularity(6, np.array(edges), part) - _brute_force_max(6, edges)) < 1e-12


def test_four_clique_single_community():
    edges = list(itertools.combinations(range(4), 2))
    part = louvain_partition(_graph(4, edges))
    assert part == [{0, 1, 2, 3}]
    assert abs(modularity(4, np.array(edges), part) - _brute_force_max(4, edges)) < 1e-12


def test_modularity_matches_networkx():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n, edges = _random_graph(rng, 12)
        if len(edges) == 0:
            continue
        part = [set(s) for s in np.array_split(rng.permutation(n), rng.integers(1, n + 1)) if len(s)]
        assert abs(modularity(n, edges, part) - nx.community.modularity(_nx(n, edges), part)) < 1e-12


def test_louvain_properties_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, edges = _random_graph(rng, 32)
        part = louvain_partition(_graph(n, edges))
        assert sorted(v for s in part for v in s) == list(range(n))
        if len(edges) == 0:
            assert part == [{v} for v in range(n)]
            continue
        g = _nx(n, edges)
        assert all(nx.is_connected(g.subgraph(s)) for s in part)
        assert _is_local_max(n, edges, part)


def test_louvain_deterministic():
    rng = np.random.default_rng(1)
    n, edges = _random_graph(rng, 20)
    assert louvain_partition(_graph(n, edges)) == louvain_partition(_graph(n, edges))


# ---------------------------------------------------------------- filtering and contour graph


def test_filter_examples():
    sets = [set(range(5)), {5, 6}, set(range(7, 14))]
    assert [len(s) for s in filter_subgraphs(sets, 3)] == [5, 7]
    assert filter_subgraphs(sets, 1) == sets
    assert filter_subgraphs(sets, 8) == []


def test_single_aggregate_node():
    g = SpatialGraph([[0, 0], [2, 0], [1, 3]], [[1, 1], [3, 3], [2, 2]], [(0, 1), (1, 2)])
    c = aggregate_contour_graph(g, [{0, 1, 2}], 4)
    assert c.pos.tolist() == [[1.0, 1.0]] and c.num_edges == 0
    assert c.feat.tolist() == [[2.0, 2.0]]


def test_feature_mean_of_two():
    g = SpatialGraph([[0, 0], [1, 0]], [[1, 1], [3, 3]], [(0, 1)])
    assert aggregate_contour_graph(g, [{0, 1}], 1).feat.tolist() == [[2.0, 2.0]]


def test_knn_on_a_line():
    edges = knn_edges(np.array([[0.0, 0], [1, 0], [5, 0]]), 1)
    assert _graph(3, edges).edges.tolist() == [[0, 1], [1, 2]]


def test_knn_degree_bound():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n, k = int(rng.integers(2, 30)), int(rng.integers(1, 6))
        pos = rng.uniform(0, 100, (n, 2))
        g = _graph(n, knn_edges(pos, k))
        deg = np.bincount(g.edges.ravel(), minlength=n)
        assert deg.min() >= min(k, n - 1)


# ---------------------------------------------------------------- bundles


def test_bundle_of_zero_frame():
    b = build_bundle(EventTensor(np.zeros((2, 32, 32), dtype=np.float32), "frame"))
    assert b.global_graph.num_nodes == 0 and b.subgraphs == [] and b.contour.num_nodes == 0


def test_blob_gives_single_contour_node():
    data = np.zeros((2, 48, 48), dtype=np.float32)
    data[0, 16:40, 16:40] = 1
    b = build_bundle(EventTensor(data, "frame"), GraphConfig(node_threshold=5, dist_threshold=20.0))
    assert b.global_graph.num_nodes == 9
    assert b.contour.num_nodes == 1 and b.contour.pos.tolist() == [[28.0, 28.0]]


def _random_frame(rng, size=64):
    data = np.zeros((2, size, size), dtype=np.float32)
    n = int(rng.integers(0, 400))
    cx, cy = rng.uniform(10, size - 10, 2)
    xs = np.clip(rng.normal(cx, 8, n), 0, size - 1).astype(int)
    ys = np.clip(rng.normal(cy, 8, n), 0, size - 1).astype(int)
    np.add.at(data[0], (ys, xs), 1)
    noise = rng.integers(0, size, (int(rng.integers(0, 30)), 2))
    np.add.at(data[1], (noise[:, 0], noise[:, 1]), 1)
    return EventTensor(data, "frame")


def test_bundle_invariants():
    rng = np.random.default_rng(11)
    cfg = GraphConfig(node_threshold=3, knn_k=2)
    for _ in range(40):
        b = build_bundle(_random_frame(rng), cfg)
        assert b.contour.num_nodes == len(b.subgraphs) == len(b.kept)
        assert all(s in b.communities for s in b.kept)
        for i, s in enumerate(b.kept):
            members = b.global_graph.pos[sorted(s)]
            assert np.all(members.min(axis=0) <= b.contour.pos[i])
            assert np.all(b.contour.pos[i] <= members.max(axis=0))
        if b.contour.num_nodes > cfg.knn_k:
            deg = np.bincount(b.contour.edges.ravel(), minlength=b.contour.num_nodes)
            assert deg.min() >= cfg.knn_k


def test_bundle_deterministic_and_dump():
    frame = _random_frame(np.random.default_rng(2))
    a, b = build_bundle(frame), build_bundle(frame)
    assert dump_bundle(a) == dump_bundle(b)
    text = dump_bundle(a)
    assert text.startswith(f"[global] nodes={a.global_graph.num_nodes} ")
    assert f"[contour] nodes={a.contour.num_nodes} " in text
