import numpy as np
import pytest

from higine import autodiff as ad
from higine.autodiff import Tensor
from higine.errors import ConfigError, ShapeMismatch
from higine.gnn_model import (
    GraphBatch, ModelConfig, embed, forward_batch, forward_model, gin_conv, gine_conv, init_params,
    pool_keep_count, predict_proba, readout, sag_pool,
)
from higine.graph_builder import Graph, radius_edges


def random_graph(rng, n, d=3, side=40.0):
    coords = rng.uniform(0, side, size=(n, 2))
    edges, w = radius_edges(coords, 20.0)
    return Graph(rng.normal(size=(n, d)), coords, edges, w)


def permuted(g, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return Graph(g.node_features[perm], g.coords_um[perm], inv[g.edges], g.edge_weights)


def identity_mlp(d):
    eye = Tensor(np.eye(d))
    zero = Tensor(np.zeros((1, d)))
    return (eye, zero, eye, zero)


def test_gin_conv_sums_neighbours():
    H = Tensor(np.array([[1.0], [2.0], [4.0]]))
    edges = np.array([[0, 1, 1, 2], [1, 0, 2, 1]])
    out = gin_conv(H, edges, Tensor([[0.0]]), identity_mlp(1)).value
    np.testing.assert_allclose(out, [[3.0], [7.0], [6.0]])
    out = gin_conv(H, edges, Tensor([[1.0]]), identity_mlp(1)).value
    np.testing.assert_allclose(out, [[4.0], [9.0], [10.0]])


def test_gine_conv_edge_messages():
    H = Tensor(np.array([[1.0], [-3.0]]))
    edges = np.array([[0, 1], [1, 0]])
    W_e = Tensor([[2.0]])
    out = gine_conv(H, edges, np.array([0.5, 0.5]), Tensor([[0.0]]), identity_mlp(1), W_e).value
    # node 0 receives relu(-3 + 1) = 0; node 1 receives relu(1 + 1) = 2; the MLP's relu clips -1
    np.testing.assert_allclose(out, [[1.0], [0.0]])
    with pytest.raises(ShapeMismatch):
        gine_conv(H, edges, np.array([0.5]), Tensor([[0.0]]), identity_mlp(1), W_e)


def test_pool_keep_count():
    assert pool_keep_count(10, 0.5) == 5
    assert pool_keep_count(7, 0.5) == 4
    assert pool_keep_count(1, 0.5) == 1
    assert pool_keep_count(3, 1.0) == 3


def test_sag_pool_keeps_top_scores_and_induces_subgraph():
    H = Tensor(np.array([[1.0], [5.0], [3.0], [4.0]]))
    edges = np.array([[0, 1, 1, 2, 2, 3], [1, 0, 2, 1, 3, 2]])
    w = np.ones(6)
    # eps = -1 drops the self term, so each score is the plain neighbour sum
    score = (Tensor([[-1.0]]), Tensor([[1.0]]), Tensor([[0.0]]))
    Hk, ek, wk, keep, segk = sag_pool(H, edges, w, 0.5, score)
    neighbour_sum = np.array([5.0, 4.0, 9.0, 3.0])
    assert list(keep) == [2, 0]
    np.testing.assert_allclose(Hk.value[:, 0], H.value[keep, 0] * np.tanh(neighbour_sum[keep]))
    assert ek.shape[1] == 0 and wk.size == 0 and list(segk) == [0, 0]


def test_readout_mean_and_max():
    H = Tensor(np.array([[1.0, -1.0], [3.0, 5.0], [10.0, 0.0]]))
    out = readout(H, np.array([0, 0, 1]), 2).value
    np.testing.assert_allclose(out, [[2.0, 2.0, 3.0, 5.0], [10.0, 0.0, 10.0, 0.0]])


def test_config_validation_and_embed_dim():
    with pytest.raises(ConfigError):
        ModelConfig(in_dim=3, sag_ratio=0.0)
    assert ModelConfig(in_dim=3, hidden_dim=16).embed_dim == 16
    assert ModelConfig(in_dim=3, hidden_dim=16, mlp_head_layers=1, graph_extra_dim=1).embed_dim == 33


def test_batched_forward_matches_single_graphs():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(in_dim=3, hidden_dim=8)
    params = init_params(cfg, rng)
    graphs = [random_graph(rng, n) for n in (5, 12, 1, 9)]
    logits, pen = forward_batch(GraphBatch.from_graphs(graphs), params, cfg)
    for i, g in enumerate(graphs):
        l1, p1 = forward_model(g, params, cfg)
        np.testing.assert_allclose(logits.value[i], l1.value[0], atol=1e-12)
        np.testing.assert_allclose(pen.value[i], p1.value[0], atol=1e-12)
    assert pen.shape == (4, cfg.embed_dim)


@pytest.mark.parametrize("edges,pool", [(True, True), (False, True), (True, False)])
def test_permutation_invariance(edges, pool):
    rng = np.random.default_rng(1)
    cfg = ModelConfig(in_dim=3, hidden_dim=8, use_edge_weights=edges, use_pooling=pool)
    params = init_params(cfg, rng)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(2, 30)))
        perm = rng.permutation(g.n_nodes)
        a, pa = forward_model(g, params, cfg)
        b, pb = forward_model(permuted(g, perm), params, cfg)
        np.testing.assert_allclose(a.value, b.value, atol=1e-5)
        np.testing.assert_allclose(pa.value, pb.value, atol=1e-5)


def test_single_node_and_edgeless_graphs():
    rng = np.random.default_rng(2)
    cfg = ModelConfig(in_dim=2, hidden_dim=4)
    params = init_params(cfg, rng)
    g = Graph(np.ones((1, 2)), np.zeros((1, 2)), np.zeros((2, 0)), np.zeros(0))
    p = predict_proba([g, g], params, cfg)
    assert p.shape == (2,) and 0 < p[0] < 1 and p[0] == p[1]


def test_graph_extra_features_enter_the_head():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(in_dim=2, hidden_dim=4, graph_extra_dim=1, use_pooling=False)
    params = init_params(cfg, rng)
    g = random_graph(rng, 6, d=2)
    a = predict_proba([g], params, cfg, extra=np.array([[0.0]]))
    b = predict_proba([g], params, cfg, extra=np.array([[1.0]]))
    assert a[0] != b[0]
    with pytest.raises(ShapeMismatch):
        predict_proba([g], params, cfg)


def test_embeddings_deterministic_and_identical_for_identical_graphs():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(in_dim=3, hidden_dim=8)
    params = init_params(cfg, rng)
    g = random_graph(rng, 10)
    alone = embed([g, g], params, cfg, batch_size=1)
    np.testing.assert_array_equal(alone[0], alone[1])
    # within one batch, BLAS blocking may differ by row position at the ulp level
    e = embed([g, g], params, cfg)
    np.testing.assert_allclose(e[0], e[1], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(e, embed([g, g], params, cfg))


def test_dropout_needs_rng_in_training():
    rng = np.random.default_rng(5)
    cfg = ModelConfig(in_dim=3, hidden_dim=4)
    params = init_params(cfg, rng)
    with pytest.raises(ValueError):
        forward_model(random_graph(rng, 4), params, cfg, training=True)


def test_full_model_gradient_check():
    rng = np.random.default_rng(6)
    cfg = ModelConfig(in_dim=3, hidden_dim=4, n_conv_layers=2, dropout_p=0.0)
    params = init_params(cfg, rng)
    for t in params.tensors():
        t.value = t.value + rng.normal(scale=0.1, size=t.shape)
    batch = GraphBatch.from_graphs([random_graph(rng, 8) for _ in range(4)])
    y = np.array([0, 1, 1, 0])

    def loss():
        return ad.softmax_cross_entropy(forward_batch(batch, params, cfg)[0], y)

    report = ad.grad_check(loss, params.tensors())
    assert report.passed(1e-4), report.per_param
