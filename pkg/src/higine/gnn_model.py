"""GIN / GINE convolutions, self-attention graph pooling and the per-level model.

Graphs are processed in batches: a :class:`GraphBatch` is the disjoint
union of several graphs with a ``seg`` vector mapping nodes to graphs.
Nodes of one graph are contiguous and segments are in ascending order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatch


@dataclass
class ModelConfig:
    in_dim: int
    hidden_dim: int = 64
    n_conv_layers: int = 3
    mlp_head_layers: int = 2
    sag_ratio: float = 0.5
    dropout_p: float = 0.2
    use_edge_weights: bool = True
    use_pooling: bool = True
    graph_extra_dim: int = 0
    n_classes: int = 2

    def __post_init__(self):
        if not 0 < self.sag_ratio <= 1:
            raise ConfigError("sag_ratio must be in (0, 1]")
        if min(self.in_dim, self.hidden_dim, self.n_conv_layers, self.mlp_head_layers, self.n_classes) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @property
    def embed_dim(self):
        """Width of the penultimate activation."""
        if self.mlp_head_layers == 1:
            return 2 * self.hidden_dim + self.graph_extra_dim
        return self.hidden_dim


class ModelParams:
    """Named learnable tensors of one model, in a fixed order."""

    def __init__(self, tensors):
        self._t = dict(tensors)

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def names(self):
        return list(self._t)

    def tensors(self):
        return list(self._t.values())

    def state(self):
        return {k: t.value.copy() for k, t in self._t.items()}

    def load_state(self, state):
        for k, t in self._t.items():
            if state[k].shape != t.shape:
                raise ShapeMismatch(f"{k}: checkpoint {state[k].shape}, model {t.shape}")
            t.value = np.array(state[k], dtype=np.float64)

    def copy(self):
        return ModelParams({k: Tensor(t.value.copy(), requires_grad=True, name=k) for k, t in self._t.items()})


def init_params(config, rng):
    """Glorot weights, zero biases, eps = 0."""
    t = {}
    h = config.hidden_dim

    def zeros(name, shape):
        t[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def dense(name, fan_in, fan_out):
        t[name] = ad.glorot(rng, fan_in, fan_out, name=name)

    d_in = config.in_dim
    for l in range(config.n_conv_layers):
        zeros(f"conv{l}.eps", (1, 1))
        dense(f"conv{l}.w1", d_in, h)
        zeros(f"conv{l}.b1", (1, h))
        dense(f"conv{l}.w2", h, h)
        zeros(f"conv{l}.b2", (1, h))
        if config.use_edge_weights:
            dense(f"conv{l}.we", 1, d_in)
        if config.use_pooling:
            zeros(f"pool{l}.eps", (1, 1))
            dense(f"pool{l}.w", h, 1)
            zeros(f"pool{l}.b", (1, 1))
            if config.use_edge_weights:
                dense(f"pool{l}.we", 1, h)
        d_in = h
    widths = [2 * h + config.graph_extra_dim] + [h] * (config.mlp_head_layers - 1) + [config.n_classes]
    for i in range(config.mlp_head_layers):
        dense(f"head{i}.w", widths[i], widths[i + 1])
        zeros(f"head{i}.b", (1, widths[i + 1]))
    return ModelParams(t)


@dataclass
class GraphBatch:
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    seg: np.ndarray
    n_graphs: int
    extra: np.ndarray | None = None

    @classmethod
    def from_graphs(cls, graphs, extra=None):
        xs, srcs, dsts, ws, segs = [], [], [], [], []
        offset = 0
        for i, g in enumerate(graphs):
            xs.append(g.node_features)
            srcs.append(g.edges[0] + offset)
            dsts.append(g.edges[1] + offset)
            ws.append(g.edge_weights)
            segs.append(np.full(g.n_nodes, i, dtype=np.intp))
            offset += g.n_nodes
        widths = {x.shape[1] for x in xs}
        if len(widths) != 1:
            raise ShapeMismatch(f"graphs in a batch have different feature widths {sorted(widths)}")
        if extra is not None:
            extra = np.asarray(extra, dtype=np.float64).reshape(len(graphs), -1)
        return cls(np.vstack(xs), np.concatenate(srcs).astype(np.intp), np.concatenate(dsts).astype(np.intp),
                   np.concatenate(ws), np.concatenate(segs), len(graphs), extra)


def _mlp(h, w1, b1, w2, b2):
    return ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(h, w1), b1)), w2), b2)


def _aggregate(H, src, dst, eps, weights=None, W_e=None, relu_messages=False):
    """(1 + eps) * h_v + sum of incoming messages."""
    if relu_messages and W_e is None:
        agg = ad.scatter_sum(ad.relu(ad.gather_rows(H, src)), dst, H.shape[0])
    else:
        agg = ad.edge_aggregate(H, src, dst, weights, W_e)
    return ad.add(ad.add(H, ad.mul(H, eps)), agg)


def gin_conv(H, edges, eps, mlp, relu_messages=False):
    """``MLP((1 + eps) * h_v + sum_u h_u)`` over the (2, E) edge array."""
    src, dst = np.asarray(edges)
    return _mlp(_aggregate(H, src, dst, eps, relu_messages=relu_messages), *mlp)


def gine_conv(H, edges, weights, eps, mlp, W_e):
    """GIN with edge messages ``relu(h_u + W_e * w_uv)`` for scalar edge weights."""
    src, dst = np.asarray(edges)
    if len(weights) != len(src):
        raise ShapeMismatch(f"{len(src)} edges but {len(weights)} weights")
    return _mlp(_aggregate(H, src, dst, eps, weights, W_e), *mlp)


def pool_keep_count(n, ratio):
    return max(1, int(math.ceil(ratio * n - 1e-9)))


def sag_pool(H, edges, weights, ratio, score_params, seg=None, n_graphs=1):
    """Self-attention graph pooling.

    ``score_params`` is ``(eps, w, b)`` or ``(eps, w, b, W_e)``. Scores come
    from a one-output GIN-style convolution; the top ``ceil(ratio * n)``
    nodes of each graph are kept, gated by ``tanh(score)``, and the edges
    among kept nodes are carried over.

    Returns ``(H_kept, edges_kept, weights_kept, kept_idx, seg_kept)``.
    """
    src, dst = np.asarray(edges, dtype=np.intp).reshape(2, -1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = H.shape[0]
    if seg is None:
        seg = np.zeros(n, dtype=np.intp)
    eps, w, b = score_params[:3]
    W_e = score_params[3] if len(score_params) > 3 else None
    scores = ad.add(ad.matmul(_aggregate(H, src, dst, eps, weights, W_e), w), b)
    counts = np.bincount(seg, minlength=n_graphs)
    k = np.array([pool_keep_count(c, ratio) for c in counts])
    keep = ad.segment_topk(scores.value, seg, k)
    gate = ad.tanh(ad.gather_rows(scores, keep))
    H_kept = ad.mul(ad.gather_rows(H, keep), gate)
    remap = np.full(n, -1, dtype=np.intp)
    remap[keep] = np.arange(keep.size)
    mask = (remap[src] >= 0) & (remap[dst] >= 0)
    new_edges = np.stack([remap[src[mask]], remap[dst[mask]]])
    return H_kept, new_edges, weights[mask], keep, seg[keep]


def readout(H, seg=None, n_graphs=1):
    """Mean and max over nodes, concatenated: width ``2 d``."""
    if seg is None:
        seg = np.zeros(H.shape[0], dtype=np.intp)
    return ad.concat_cols(ad.segment_mean(H, seg, n_graphs), ad.segment_max(H, seg, n_graphs))


def forward_batch(batch, params, config, training=False, rng=None):
    """Logits (G x classes) and penultimate activations (G x embed_dim)."""
    if batch.x.shape[1] != config.in_dim:
        raise ShapeMismatch(f"node features have width {batch.x.shape[1]}, model expects {config.in_dim}")
    if training and config.dropout_p > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    p = config.dropout_p
    H = Tensor(batch.x)
    src, dst, w, seg = batch.src, batch.dst, batch.weights, batch.seg
    for l in range(config.n_conv_layers):
        H = ad.dropout(H, p, training, rng)
        mlp = (params[f"conv{l}.w1"], params[f"conv{l}.b1"], params[f"conv{l}.w2"], params[f"conv{l}.b2"])
        if config.use_edge_weights:
            H = gine_conv(H, (src, dst), w, params[f"conv{l}.eps"], mlp, params[f"conv{l}.we"])
        else:
            H = gin_conv(H, (src, dst), params[f"conv{l}.eps"], mlp)
        H = ad.relu(H)
        if config.use_pooling:
            score = [params[f"pool{l}.eps"], params[f"pool{l}.w"], params[f"pool{l}.b"]]
            if config.use_edge_weights:
                score.append(params[f"pool{l}.we"])
            H, (src, dst), w, _, seg = sag_pool(H, (src, dst), w, config.sag_ratio, score, seg, batch.n_graphs)
    z = readout(H, seg, batch.n_graphs)
    if config.graph_extra_dim:
        if batch.extra is None or batch.extra.shape[1] != config.graph_extra_dim:
            raise ShapeMismatch(f"model expects {config.graph_extra_dim} graph-level extra features")
        z = ad.concat_cols(z, Tensor(batch.extra))
    for i in range(config.mlp_head_layers):
        if i == config.mlp_head_layers - 1:
            penultimate = z
        z = ad.dropout(z, p, training, rng)
        z = ad.add(ad.matmul(z, params[f"head{i}.w"]), params[f"head{i}.b"])
        if i < config.mlp_head_layers - 1:
            z = ad.relu(z)
    return z, penultimate


def forward_model(graph, params, config, training=False, rng=None):
    """Single-graph forward; returns ``(logits (2,), penultimate (embed_dim,))`` Tensors of one row."""
    return forward_batch(GraphBatch.from_graphs([graph]), params, config, training, rng)


def predict_proba(graphs, params, config, batch_size=64, extra=None):
    """Positive-class (index 1) softmax probability per graph, inference mode."""
    out = []
    for i in range(0, len(graphs), batch_size):
        ex = None if extra is None else extra[i:i + batch_size]
        logits, _ = forward_batch(GraphBatch.from_graphs(graphs[i:i + batch_size], ex), params, config)
        out.append(ad.softmax(logits.value)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def embed(graphs, params, config, batch_size=64, extra=None):
    out = []
    for i in range(0, len(graphs), batch_size):
        ex = None if extra is None else extra[i:i + batch_size]
        _, pen = forward_batch(GraphBatch.from_graphs(graphs[i:i + batch_size], ex), params, config)
        out.append(pen.value)
    return np.vstack(out) if out else np.zeros((0, config.embed_dim))
