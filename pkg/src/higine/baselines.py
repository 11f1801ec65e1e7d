"""Comparison methods sharing the HiGINE prediction schema and folds.

Ground-truth and stage-only scores, shallow learners on per-core summary
statistics (logistic regression, linear SVC) and a flat GIN over 3-NN
graphs of whole cores with nested hyperparameter selection.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import itertools

import numpy as np
from scipy.special import expit

from .errors import NonConvergence, NoTrainingData
from .gnn_model import GraphBatch, ModelConfig, forward_batch
from .graph_builder import Graph, Provenance, knn_edges
from .pipeline import (
    CvSummary, FeatureNormalizer, FoldResult, PatientPrediction, TrainConfig, cohort_folds,
    evaluate_predictions, split_validation, stratified_kfold, train_model,
)
from . import autodiff as ad
from .survival_metrics import auroc

METHODS = ("label", "stage", "logreg", "svc", "flatgin")


# -- summary statistics -----------------------------------------------------

def _moments(x, width):
    if x.shape[0] == 0:
        return np.zeros(2 * width)
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def summary_features(core, split_by_tissue=False, include_stage=False, stage=False):
    """Per-feature mean and population std over the core's cells.

    With ``split_by_tissue`` the block is computed over tumor cells, then
    over stroma cells, each followed by a 0/1 presence flag. A trailing
    stage bit is appended when ``include_stage`` is set.
    """
    x = core.features
    d = x.shape[1]
    if split_by_tissue and core.tissue_tumor is not None:
        parts = []
        for mask in (core.tissue_tumor, ~core.tissue_tumor):
            parts.append(_moments(x[mask], d))
            parts.append([float(mask.any())])
        v = np.concatenate(parts)
    else:
        v = _moments(x, d)
    if include_stage:
        v = np.append(v, float(bool(stage)))
    return v


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        s = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(s > 0, s, 1.0))

    def __call__(self, X):
        return (X - self.mean) / self.std


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    kind: str = "logreg"

    def decision(self, X):
        return np.asarray(X, dtype=float) @ self.w + self.b

    def score(self, X):
        """Probability for logistic regression, signed margin for the SVC."""
        z = self.decision(X)
        return expit(z) if self.kind == "logreg" else z


def logreg_objective(w, b, X, y, l2):
    """Negative log-likelihood plus ``l2 / 2 * |w|^2`` (bias unpenalised)."""
    z = X @ w + b
    return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w)


def train_logreg(X, y, l2=1.0, tol=1e-6, max_iter=100):
    """Newton's method with backtracking until the gradient norm drops below ``tol``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    A = np.column_stack([X, np.ones(n)])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)

    def obj(t):
        return logreg_objective(t[:-1], t[-1], X, y, l2)

    f = obj(theta)
    for _ in range(max_iter):
        p = expit(A @ theta)
        grad = A.T @ (p - y) + reg * theta
        if np.linalg.norm(grad) < tol:
            return LinearModel(theta[:-1].copy(), float(theta[-1]), "logreg")
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(reg) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = obj(cand)
            if fc <= f + 1e-4 * t * -(grad @ step):
                break
            t /= 2
        theta, f = cand, fc
    p = expit(A @ theta)
    gnorm = np.linalg.norm(A.T @ (p - y) + reg * theta)
    if gnorm < tol:
        return LinearModel(theta[:-1].copy(), float(theta[-1]), "logreg")
    raise NonConvergence(f"logistic regression stopped with gradient norm {gnorm:.3g}")


def svc_objective(w, b, X, y, c):
    """``|w|^2 / (2 c) + mean hinge`` with labels mapped to -1/+1."""
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    hinge = np.maximum(0.0, 1.0 - s * (X @ w + b))
    return float(0.5 / c * w @ w + hinge.mean())


def train_linear_svc(X, y, c=1.0, n_iter=5000):
    """Full-batch subgradient descent with 1/(lambda t) steps and suffix averaging.

    The objective uses the mean hinge loss, so duplicating samples leaves
    the problem unchanged. Deterministic: no sampling is involved.
    """
    X = np.asarray(X, dtype=float)
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    n, d = X.shape
    lam = 1.0 / c
    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    start = n_iter // 2
    for t in range(1, n_iter + 1):
        active = s * (X @ w + b) < 1.0
        gw = lam * w - (s[active, None] * X[active]).sum(axis=0) / n
        gb = -s[active].sum() / n
        eta = 1.0 / (lam * t)
        w = w - eta * gw
        b = b - eta * gb
        if t > start:
            k = t - start
            w_avg += (w - w_avg) / k
            b_avg += (b - b_avg) / k
    return LinearModel(w_avg, float(b_avg), "svc")


# -- trivial scorers -------------------------------------------------------------

def stage_only_score(clinical, patient_ids=None):
    ids = sorted(clinical) if patient_ids is None else sorted(patient_ids)
    return [PatientPrediction(p, 1.0 if clinical[p].stage_binary else 0.0) for p in ids]


def label_upper_bound(clinical, patient_ids=None):
    ids = sorted(clinical) if patient_ids is None else sorted(patient_ids)
    return [PatientPrediction(p, float(int(clinical[p].label))) for p in ids if clinical[p].label is not None]


# -- shallow learners -------------------------------------------------------------

def _core_table(cohort, ids, split_by_tissue, include_stage):
    rows, owners = [], []
    wanted = set(ids)
    for core in cohort.cores:
        if core.patient_id in wanted:
            stage = cohort.clinical[core.patient_id].stage_binary
            rows.append(summary_features(core, split_by_tissue, include_stage, stage))
            owners.append(core.patient_id)
    return np.array(rows), owners


def _patient_means(values, owners):
    acc = {}
    for v, p in zip(values, owners):
        acc.setdefault(p, []).append(float(v))
    return [PatientPrediction(p, float(np.mean(v)), {}) for p, v in sorted(acc.items())]


def shallow_predict(cohort, train_ids, test_ids, method="logreg", split_by_tissue=False,
                    include_stage=False, l2=1.0, c=1.0):
    """Fit on training cores (patient label per core), score test patients by mean core score."""
    X_tr, own_tr = _core_table(cohort, train_ids, split_by_tissue, include_stage)
    if len(own_tr) == 0:
        raise NoTrainingData("no training cores")
    y_tr = np.array([cohort.label(p) for p in own_tr], dtype=float)
    std = Standardizer.fit(X_tr)
    if method == "logreg":
        model = train_logreg(std(X_tr), y_tr, l2)
    elif method == "svc":
        model = train_linear_svc(std(X_tr), y_tr, c)
    else:
        raise ValueError(f"unknown shallow method {method!r}")
    X_te, own_te = _core_table(cohort, test_ids, split_by_tissue, include_stage)
    return _patient_means(model.score(std(X_te)), own_te)


# -- flat GIN ------------------------------------------------------------------------

FLAT_GIN_GRID = tuple(itertools.product((1e-3, 1e-4), (32, 64)))


def flat_core_graph(core, node_features, k=3):
    """Whole-core graph with symmetrised 3-NN edges (unit weights)."""
    edges = knn_edges(core.coords_um, k)
    return Graph(node_features, core.coords_um, edges, np.ones(edges.shape[1]), Provenance.CORE,
                 cell_index=np.arange(core.n_cells))


def _flat_dataset(cohort, ids, normalizer, fuse_stage, k):
    graphs, labels, extra, owners = [], [], [], []
    wanted = set(ids)
    for core in cohort.cores:
        if core.patient_id in wanted:
            graphs.append(flat_core_graph(core, normalizer.transform(core), k))
            rec = cohort.clinical[core.patient_id]
            labels.append(cohort.label(core.patient_id))
            extra.append([float(bool(rec.stage_binary))])
            owners.append(core.patient_id)
    return graphs, np.array(labels), (np.array(extra) if fuse_stage else None), owners


def flat_gin_config(config, hidden_dim, fuse_stage, in_dim):
    return ModelConfig(in_dim=in_dim, hidden_dim=hidden_dim, n_conv_layers=3, mlp_head_layers=2,
                       dropout_p=config.subsample_model.get("dropout_p", 0.2), use_edge_weights=False,
                       use_pooling=False, graph_extra_dim=1 if fuse_stage else 0)


def _fit_flat(cohort, train_ids, config, lr, hidden, fuse_stage, rng, k):
    cfg = replace(config, lr=lr)
    inner, val = split_validation(train_ids, [cohort.label(p) for p in train_ids], cfg.val_fraction, rng)
    train_cores = [c for c in cohort.cores if c.patient_id in set(train_ids)]
    normalizer = FeatureNormalizer.fit(train_cores, cfg.normalization, cfg.graph.include_tissue)
    g_tr, y_tr, e_tr, _ = _flat_dataset(cohort, inner, normalizer, fuse_stage, k)
    g_va, y_va, e_va, _ = _flat_dataset(cohort, val, normalizer, fuse_stage, k)
    model_cfg = flat_gin_config(cfg, hidden, fuse_stage, g_tr[0].node_features.shape[1])
    params, _ = train_model(g_tr, y_tr, model_cfg, cfg, rng, g_va, y_va, e_tr, e_va)
    return normalizer, model_cfg, params


def _flat_predict(cohort, ids, normalizer, model_cfg, params, fuse_stage, k):
    graphs, _, extra, owners = _flat_dataset(cohort, ids, normalizer, fuse_stage, k)
    logits = []
    for i in range(0, len(graphs), 64):
        ex = None if extra is None else extra[i:i + 64]
        out, _ = forward_batch(GraphBatch.from_graphs(graphs[i:i + 64], ex), params, model_cfg)
        logits.append(out.value)
    logits = np.vstack(logits)
    by_patient = {}
    for row, p in zip(logits, owners):
        by_patient.setdefault(p, []).append(row)
    # logits are averaged per patient before the softmax
    return [PatientPrediction(p, float(ad.softmax(np.mean(rows, axis=0, keepdims=True))[0, 1]))
            for p, rows in sorted(by_patient.items())]


def flat_gin(cohort, train_ids, test_ids, config, fuse_stage=False, grid=FLAT_GIN_GRID, nested_k=5,
             rng=None, k_neighbors=3):
    """Flat GIN predictions for ``test_ids`` with (lr, hidden) chosen by inner CV AUROC.

    Returns ``(predictions, chosen (lr, hidden), inner scores per grid point)``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    train_ids = sorted(train_ids)
    grid = list(grid)
    scores = {}
    if len(grid) > 1:
        inner_folds = stratified_kfold(
            [(p, cohort.label(p), cohort.clinical[p].stage_binary) for p in train_ids],
            nested_k, int(rng.integers(2**31)))
        for lr, hidden in grid:
            preds = []
            for fold in inner_folds:
                fit_ids = [p for p in train_ids if p not in set(fold)]
                fitted = _fit_flat(cohort, fit_ids, config, lr, hidden, fuse_stage, rng, k_neighbors)
                preds.extend(_flat_predict(cohort, fold, *fitted, fuse_stage, k_neighbors))
            labels = [cohort.label(p.patient_id) for p in preds]
            scores[(lr, hidden)] = auroc(labels, [p.prob_short for p in preds])
        best = max(grid, key=lambda g: (scores[g], -grid.index(g)))
    else:
        best = grid[0]
    fitted = _fit_flat(cohort, train_ids, config, best[0], best[1], fuse_stage, rng, k_neighbors)
    return _flat_predict(cohort, test_ids, *fitted, fuse_stage, k_neighbors), best, scores


# -- cross-validation -------------------------------------------------------------------

def run_baseline_cv(cohort, method, k=5, config=None, fuse_stage=False, split_by_tissue=False,
                    l2=1.0, c=1.0, grid=FLAT_GIN_GRID, nested_k=5):
    """Any baseline evaluated on the same patient folds as :func:`run_cv`."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    config = TrainConfig() if config is None else config
    folds = cohort_folds(cohort, k, config.seed)
    seqs = np.random.SeedSequence(config.seed).spawn(k)
    results, all_preds = [], []
    labeled = cohort.labeled_ids()
    for i, test_ids in enumerate(folds):
        train_ids = sorted(set(labeled) - set(test_ids))
        if method == "label":
            preds = label_upper_bound(cohort.clinical, test_ids)
        elif method == "stage":
            preds = stage_only_score(cohort.clinical, test_ids)
        elif method in ("logreg", "svc"):
            preds = shallow_predict(cohort, train_ids, test_ids, method, split_by_tissue, fuse_stage, l2, c)
        else:
            preds = flat_gin(cohort, train_ids, test_ids, config, fuse_stage, grid, nested_k,
                             np.random.default_rng(seqs[i]))[0]
        a, ci, flags = evaluate_predictions(preds, cohort.clinical)
        results.append(FoldResult(i, list(test_ids), a, ci, flags))
        all_preds.extend(preds)
    name = {"label": "Label", "stage": "Stage", "logreg": "LogReg", "svc": "SVC", "flatgin": "GIN"}[method]
    uses_stage = method == "stage" or (fuse_stage and method != "label")
    return CvSummary(results, all_preds, name, uses_stage)
