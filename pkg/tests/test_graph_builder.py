import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from higine.cell_table import Core, attach_stage_feature
from higine.errors import ConfigError, DimensionMismatch, DoubleFusion
from higine.graph_builder import (
    Graph, GraphBuildConfig, Provenance, build_core_graph, estimate_window_size, knn_edges,
    load_graphs, make_subsamples, nearest_cells, radius_edges, save_graphs, subsample_indices,
    window_centers,
)


def brute_radius(coords, radius, min_distance=0.1):
    out = {}
    for i in range(len(coords)):
        for j in range(len(coords)):
            if i != j:
                d = float(np.sqrt(np.sum((coords[i] - coords[j]) ** 2)))
                if d <= radius:
                    out[(i, j)] = 1.0 / max(d, min_distance)
    return out


def brute_knn(coords, k):
    pairs = set()
    for i in range(len(coords)):
        d = np.sum((coords - coords[i]) ** 2, axis=1)
        others = [j for j in sorted(range(len(coords)), key=lambda j: (d[j], j)) if j != i]
        for j in others[:k]:
            pairs.add((i, j))
            pairs.add((j, i))
    return pairs


def as_dict(edges, weights):
    return {(int(u), int(v)): float(w) for u, v, w in zip(edges[0], edges[1], weights)}


def core_with(n, seed=0, side=None):
    rng = np.random.default_rng(seed)
    side = np.sqrt(n / 0.01) if side is None else side
    return Core("c0", "p0", rng.uniform(0, side, size=(n, 2)), rng.normal(size=(n, 3)))


def test_radius_edges_example_weight():
    edges, w = radius_edges(np.array([[0.0, 0.0], [10.0, 0.0], [40.0, 0.0]]), 20.0)
    assert as_dict(edges, w) == {(0, 1): 0.1, (1, 0): 0.1}


def test_coincident_points_clamped():
    edges, w = radius_edges(np.zeros((2, 2)), 20.0)
    np.testing.assert_allclose(w, [10.0, 10.0])


@pytest.mark.parametrize("n,seed", [(2, 0), (30, 1), (200, 2), (500, 3)])
def test_radius_edges_match_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    coords = np.round(rng.uniform(0, 150, size=(n, 2)), 1)
    edges, w = radius_edges(coords, 20.0)
    got = as_dict(edges, w)
    want = brute_radius(coords, 20.0)
    assert got.keys() == want.keys()
    for key, val in want.items():
        assert got[key] == pytest.approx(val, rel=1e-12)


def test_radius_boundary_is_inclusive():
    edges, _ = radius_edges(np.array([[0.0, 0.0], [3.0, 4.0]]), 5.0)
    assert edges.shape[1] == 2


@pytest.mark.parametrize("n,k,seed", [(5, 3, 0), (60, 3, 1), (300, 3, 2), (500, 5, 3)])
def test_knn_edges_match_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, 30, size=(n, 2)).astype(float)  # integer grid forces distance ties
    got = {(int(u), int(v)) for u, v in knn_edges(coords, k).T}
    assert got == brute_knn(coords, k)


def test_knn_caps_k():
    e = knn_edges(np.array([[0.0, 0], [1, 0]]), 3)
    assert {tuple(x) for x in e.T} == {(0, 1), (1, 0)}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(1.0, 50.0), st.integers(0, 10_000))
def test_graph_invariants_property(n, radius, seed):
    coords = np.random.default_rng(seed).uniform(0, 60, size=(n, 2))
    edges, w = radius_edges(coords, radius)
    g = Graph(np.zeros((n, 1)), coords, edges, w)
    g.validate()
    d = np.linalg.norm(coords[edges[0]] - coords[edges[1]], axis=1)
    np.testing.assert_allclose(w, 1.0 / np.maximum(d, 0.1))


def test_window_size_and_centers():
    coords = np.array([[0.0, 0.0], [100.0, 100.0]] + [[50.0, 50.0]] * 98)
    w = estimate_window_size(coords, 25)
    assert w == pytest.approx(50.0)
    c0 = window_centers(coords, w, 0.0)
    assert sorted(set(c0[:, 0])) == [25.0, 75.0]
    c75 = window_centers(coords, w, 0.75)
    assert sorted(set(c75[:, 0])) == pytest.approx([25.0, 37.5, 50.0, 62.5, 75.0])


def test_nearest_cells_tie_break():
    coords = np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [5.0, 5.0]])
    assert list(nearest_cells(coords, np.zeros(2), 2)) == [0, 1]


def test_subsamples_have_n_target_nodes():
    core = core_with(3000, seed=4)
    cfg = GraphBuildConfig()
    for ov in cfg.overlaps:
        graphs = make_subsamples(core, cfg, ov)
        assert graphs and all(g.n_nodes == 1000 for g in graphs)
        for g in graphs[:2]:
            g.validate()
            d = np.linalg.norm(g.coords_um[g.edges[0]] - g.coords_um[g.edges[1]], axis=1)
            np.testing.assert_allclose(g.edge_weights, 1.0 / np.maximum(d, 0.1))
    assert len(subsample_indices(core, 1000, 0.75)) > len(subsample_indices(core, 1000, 0.0))


def test_small_core_single_subsample_and_single_node_core_graph():
    core = core_with(50)
    cfg = GraphBuildConfig(n_target=100)
    subs = make_subsamples(core, cfg, 0.5)
    assert len(subs) == 1 and subs[0].n_nodes == 50
    cg = build_core_graph(subs, np.ones((1, 4)), cfg)
    assert cg.n_nodes == 1 and cg.n_edges == 0 and cg.provenance is Provenance.CORE


def test_core_graph_nodes_at_centroids():
    core = core_with(800, seed=5)
    cfg = GraphBuildConfig(n_target=100)
    subs = make_subsamples(core, cfg, 0.25)
    cg = build_core_graph(subs, np.zeros((len(subs), 2)), cfg)
    np.testing.assert_allclose(cg.coords_um, [g.coords_um.mean(axis=0) for g in subs])
    cg.validate()
    with pytest.raises(DimensionMismatch):
        build_core_graph(subs, np.zeros((len(subs) + 1, 2)), cfg)


def test_stage_fusion_appends_one_column_once():
    g = Graph(np.ones((3, 4)), np.zeros((3, 2)), np.zeros((2, 0)), np.zeros(0), Provenance.CORE)
    fused = attach_stage_feature(g, True)
    assert fused.node_features.shape == (3, 5) and np.all(fused.node_features[:, -1] == 1.0)
    assert attach_stage_feature(g, False).node_features[0, -1] == 0.0
    with pytest.raises(DoubleFusion):
        attach_stage_feature(fused, True)


def test_graph_dump_roundtrip(tmp_path):
    core = core_with(300, seed=6)
    graphs = make_subsamples(core, GraphBuildConfig(n_target=100), 0.5)
    save_graphs(tmp_path / "g.npz", graphs)
    back = load_graphs(tmp_path / "g.npz")
    assert len(back) == len(graphs)
    for a, b in zip(graphs, back):
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.edge_weights, b.edge_weights)
        np.testing.assert_array_equal(a.node_features, b.node_features)
        np.testing.assert_array_equal(a.cell_index, b.cell_index)


def test_config_validation():
    with pytest.raises(ConfigError):
        GraphBuildConfig(overlaps=(0.5, 0.25))
    with pytest.raises(ConfigError):
        GraphBuildConfig(overlaps=(1.0,))
    with pytest.raises(ConfigError):
        radius_edges(np.zeros((3, 2)), 0.0)
