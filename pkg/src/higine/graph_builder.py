"""Edge-weighted cell graphs at two levels.

Subsample graphs hold the ``n_target`` cells nearest to each sliding-window
center, linked within ``subsample_radius_um`` and weighted by reciprocal
distance. Core graphs have one node per subsample (at its centroid) and
the same weighting with ``core_radius_um``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import enum
import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, DimensionMismatch, EmptyCore

GRAPH_DUMP_VERSION = 1


class Provenance(str, enum.Enum):
    SUBSAMPLE = "subsample"
    CORE = "core"


@dataclass
class Graph:
    """Node features, planar coordinates and a symmetric weighted edge list.

    ``edges`` is a (2, E) integer array of (source, target) rows holding
    both directions of every undirected edge.
    """

    node_features: np.ndarray
    coords_um: np.ndarray
    edges: np.ndarray
    edge_weights: np.ndarray
    provenance: Provenance = Provenance.SUBSAMPLE
    cell_index: np.ndarray | None = None
    stage_fused: bool = False

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.coords_um = np.asarray(self.coords_um, dtype=np.float64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(2, -1)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)
        if self.node_features.shape[0] != self.coords_um.shape[0]:
            raise DimensionMismatch("node feature rows and coordinate rows differ")
        if self.edges.shape[1] != self.edge_weights.shape[0]:
            raise DimensionMismatch("one weight per directed edge is required")

    @property
    def n_nodes(self):
        return self.node_features.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[1]

    @property
    def centroid_um(self):
        return self.coords_um.mean(axis=0)

    def with_features(self, node_features):
        return Graph(node_features, self.coords_um, self.edges, self.edge_weights,
                     self.provenance, self.cell_index, self.stage_fused)

    def validate(self):
        """Raise DataError if an edge-list invariant is broken."""
        src, dst = self.edges
        n = self.n_nodes
        if self.n_edges and (src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n):
            raise DataError("edge index out of range")
        if np.any(src == dst):
            raise DataError("self-loop present")
        if not np.all(np.isfinite(self.edge_weights)) or np.any(self.edge_weights <= 0):
            raise DataError("edge weights must be positive and finite")
        fwd = dict(zip(zip(src.tolist(), dst.tolist()), self.edge_weights.tolist()))
        for (u, v), w in fwd.items():
            if fwd.get((v, u)) != w:
                raise DataError(f"edge ({u}, {v}) has no matching reverse edge")


@dataclass
class GraphBuildConfig:
    n_target: int = 1000
    subsample_radius_um: float = 20.0
    core_radius_um: float = 330.0
    overlaps: tuple = (0.0, 0.25, 0.5, 0.75)
    min_distance_um: float = 0.1
    include_tissue: bool = True

    def __post_init__(self):
        self.overlaps = tuple(float(o) for o in self.overlaps)
        if self.n_target < 1:
            raise ConfigError("n_target must be positive")
        if min(self.subsample_radius_um, self.core_radius_um, self.min_distance_um) <= 0:
            raise ConfigError("radii and min_distance must be positive")
        if any(not 0.0 <= o < 1.0 for o in self.overlaps):
            raise ConfigError("overlaps must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.overlaps, self.overlaps[1:])):
            raise ConfigError("overlaps must be strictly increasing")


def _symmetric(pairs, weights):
    """(i, j) pairs with i < j -> both directions, sorted by (source, target)."""
    if len(pairs) == 0:
        return np.zeros((2, 0), dtype=np.int64), np.zeros(0)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = np.concatenate([weights, weights])
    order = np.lexsort((dst, src))
    return np.stack([src[order], dst[order]]).astype(np.int64), w[order]


def radius_edges(coords, radius, min_distance=0.1):
    """All pairs of distinct nodes within ``radius``; weight ``1 / max(dist, min_distance)``.

    Coincident nodes are linked (distance 0 is clamped to ``min_distance``).
    """
    if radius <= 0:
        raise ConfigError("radius must be positive")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] < 2:
        return np.zeros((2, 0), dtype=np.int64), np.zeros(0)
    pairs = cKDTree(coords).query_pairs(radius * (1 + 1e-9), output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((2, 0), dtype=np.int64), np.zeros(0)
    d = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
    keep = d <= radius
    pairs, d = pairs[keep], d[keep]
    return _symmetric(pairs, 1.0 / np.maximum(d, min_distance))


def knn_edges(coords, k, symmetrize=True):
    """Each node linked to its ``k`` nearest nodes (ties to the lower index).

    With ``symmetrize=False`` the directed (node, neighbour) list is
    returned; otherwise the union of both directions, sorted.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < 2:
        return np.zeros((2, 0), dtype=np.int64)
    k = min(k, n - 1)
    tree = cKDTree(coords)
    dk, _ = tree.query(coords, k=k + 1)
    radius = np.atleast_2d(dk)[:, -1]
    src, dst = [], []
    for i in range(n):
        cand = np.asarray(tree.query_ball_point(coords[i], radius[i] * (1 + 1e-9) + 1e-12), dtype=np.int64)
        cand = cand[cand != i]
        d = np.sum((coords[cand] - coords[i]) ** 2, axis=1)
        chosen = cand[np.lexsort((cand, d))[:k]]
        src.extend([i] * len(chosen))
        dst.extend(chosen.tolist())
    e = np.array([src, dst], dtype=np.int64)
    if not symmetrize:
        return e
    both = np.concatenate([e, e[::-1]], axis=1)
    both = np.unique(both, axis=1)
    order = np.lexsort((both[1], both[0]))
    return both[:, order]


def estimate_window_size(coords, n_target):
    """Side length whose expected cell count, at the core's mean density, is ``n_target``."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] == 0:
        raise EmptyCore("cannot size a window for an empty core")
    extent = coords.max(axis=0) - coords.min(axis=0)
    area = float(extent[0] * extent[1])
    diag = float(np.hypot(*extent))
    if area <= 0:
        return max(diag, 1.0)
    density = coords.shape[0] / area
    return math.sqrt(n_target / density)


def window_centers(coords, window, overlap):
    """Grid of window centers over the bounding box, stride ``window * (1 - overlap)``.

    Centers start half a window inside the box; the last center on each
    axis is clamped to the far edge so the whole box is swept.
    """
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    stride = window * (1.0 - overlap)
    axes = []
    for a in range(2):
        start = lo[a] + window / 2
        stop = hi[a] - window / 2
        if stop <= start:
            axes.append(np.array([(lo[a] + hi[a]) / 2]))
            continue
        steps = int(math.ceil((stop - start) / stride - 1e-9))
        axes.append(np.minimum(start + stride * np.arange(steps + 1), stop))
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def nearest_cells(coords, center, k):
    """Indices of the ``k`` cells nearest ``center`` (distance, then index), ascending by index."""
    d2 = np.sum((coords - center) ** 2, axis=1)
    order = np.lexsort((np.arange(coords.shape[0]), d2))
    return np.sort(order[:k])


def subsample_indices(core, n_target, overlap):
    """Deduplicated cell-index sets for one overlap setting, in grid order."""
    if core.n_cells == 0:
        raise EmptyCore(f"core {core.core_id!r} has no cells")
    k = min(n_target, core.n_cells)
    if k == core.n_cells:
        return [np.arange(core.n_cells)]
    w = estimate_window_size(core.coords_um, n_target)
    seen = set()
    out = []
    for c in window_centers(core.coords_um, w, overlap):
        idx = nearest_cells(core.coords_um, c, k)
        key = idx.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(idx)
    return out


def graph_from_cells(core, idx, config, node_features=None):
    coords = core.coords_um[idx]
    feats = core.node_features(config.include_tissue) if node_features is None else node_features
    edges, weights = radius_edges(coords, config.subsample_radius_um, config.min_distance_um)
    return Graph(feats[idx], coords, edges, weights, Provenance.SUBSAMPLE, cell_index=np.asarray(idx))


def make_subsamples(core, config, overlap, node_features=None):
    """Subsample graphs of one core for one overlap fraction.

    ``node_features`` overrides the core's own per-cell features (e.g.
    normalized copies); rows must align with the core's cells.
    """
    return [graph_from_cells(core, idx, config, node_features)
            for idx in subsample_indices(core, config.n_target, overlap)]


def build_core_graph(subsamples, node_features, config):
    """One node per subsample, placed at its centroid, linked within ``core_radius_um``."""
    node_features = np.asarray(node_features, dtype=np.float64)
    if node_features.ndim != 2 or node_features.shape[0] != len(subsamples):
        raise DimensionMismatch(
            f"{len(subsamples)} subsamples but node feature matrix of shape {node_features.shape}")
    centroids = np.array([g.centroid_um for g in subsamples]).reshape(-1, 2)
    edges, weights = radius_edges(centroids, config.core_radius_um, config.min_distance_um)
    return Graph(node_features, centroids, edges, weights, Provenance.CORE)


def save_graphs(path, graphs):
    """Dump graphs to a versioned ``.npz`` archive."""
    arrays = {"format_version": np.array(GRAPH_DUMP_VERSION), "n_graphs": np.array(len(graphs))}
    for i, g in enumerate(graphs):
        arrays[f"g{i}_header"] = np.array([g.n_nodes, g.node_features.shape[1], g.n_edges])
        arrays[f"g{i}_coords"] = g.coords_um
        arrays[f"g{i}_features"] = g.node_features
        arrays[f"g{i}_edges"] = np.vstack([g.edges.astype(np.float64), g.edge_weights[None, :]]).T
        arrays[f"g{i}_provenance"] = np.array(g.provenance.value)
        arrays[f"g{i}_cells"] = g.cell_index if g.cell_index is not None else np.zeros(0, dtype=np.int64)
    np.savez_compressed(path, **arrays)


def load_graphs(path):
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != GRAPH_DUMP_VERSION:
            raise DataError(f"unsupported graph dump version {version}")
        graphs = []
        for i in range(int(z["n_graphs"])):
            n, d, e = z[f"g{i}_header"].tolist()
            triples = z[f"g{i}_edges"].reshape(e, 3)
            cells = z[f"g{i}_cells"]
            graphs.append(Graph(
                z[f"g{i}_features"].reshape(n, d),
                z[f"g{i}_coords"],
                triples[:, :2].T.astype(np.int64),
                triples[:, 2],
                Provenance(str(z[f"g{i}_provenance"])),
                cell_index=cells if cells.size else None,
            ))
    return graphs


@dataclass
class SubsampleSet:
    core_id: str
    overlap_fraction: float
    graphs: list = field(default_factory=list)
