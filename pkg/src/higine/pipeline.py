"""Two-step hierarchical training, patient aggregation and cross-validation.

Stage one trains a GNN on subsample graphs labelled with their patient's
survival label. Its penultimate activations become node features of core
graphs (one per core and overlap setting), optionally extended with the
cancer-stage bit, and stage two trains a second GNN on those. A patient's
score is the plain mean of the positive-class (short survival)
probabilities over all of its cores and augmentation sets.

Randomness: one ``numpy.random.Generator`` per fold, drawn in this order:
validation split, stage-one initialisation, stage-one epochs (shuffle then
dropout masks per batch), stage-two initialisation, stage-two epochs.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import csv
import enum
import json
import logging
from pathlib import Path
import warnings

import numpy as np

from . import autodiff as ad
from .cell_table import ClinicalRecord, Label, attach_stage_feature
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, NoComparablePairs, NoPredictions, NoTrainingData, SingleClass, TooFewPatients
from .gnn_model import GraphBatch, ModelConfig, embed, forward_batch, init_params, predict_proba
from .graph_builder import GraphBuildConfig, build_core_graph, make_subsamples
from .survival_metrics import auroc, c_index

log = logging.getLogger(__name__)


class ClassWeighting(str, enum.Enum):
    NONE = "none"
    INVERSE_FREQUENCY = "inverse_frequency"


class Normalization(str, enum.Enum):
    NONE = "none"
    ZSCORE = "zscore"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    class_weighting: ClassWeighting = ClassWeighting.INVERSE_FREQUENCY
    subsample_model: dict = field(default_factory=dict)
    core_model: dict = field(default_factory=dict)
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    use_stage_fusion: bool = False
    use_hierarchy: bool = True
    use_edge_weights: bool = True
    normalization: Normalization = Normalization.ZSCORE
    batch_size: int = 1
    val_fraction: float = 0.15

    def __post_init__(self):
        self.class_weighting = ClassWeighting(self.class_weighting)
        self.normalization = Normalization(self.normalization)
        if isinstance(self.graph, dict):
            self.graph = GraphBuildConfig(**self.graph)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        bad = set(self.subsample_model) | set(self.core_model)
        bad -= {f.name for f in fields(ModelConfig)} - {"in_dim", "use_edge_weights"}
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")

    @property
    def overlaps(self):
        return self.graph.overlaps

    def model_config(self, level, in_dim):
        overrides = self.subsample_model if level == "subsample" else self.core_model
        return ModelConfig(in_dim=in_dim, use_edge_weights=self.use_edge_weights, **overrides)

    def to_dict(self):
        d = asdict(self)
        d["class_weighting"] = self.class_weighting.value
        d["normalization"] = self.normalization.value
        d["graph"]["overlaps"] = list(self.graph.overlaps)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        if "graph" in d and isinstance(d["graph"], dict):
            d["graph"] = GraphBuildConfig(**d["graph"])
        return cls(**d)


@dataclass
class Cohort:
    cores: list
    clinical: dict

    def __post_init__(self):
        if not isinstance(self.clinical, dict):
            self.clinical = {r.patient_id: r for r in self.clinical}

    def core_indices(self, patient_id):
        return [i for i, c in enumerate(self.cores) if c.patient_id == patient_id]

    def labeled_ids(self):
        with_cores = {c.patient_id for c in self.cores}
        return sorted(p for p, r in self.clinical.items() if r.label is not None and p in with_cores)

    def label(self, pid):
        return int(self.clinical[pid].label)


@dataclass
class PatientPrediction:
    patient_id: str
    prob_short: float
    per_core_probs: dict = field(default_factory=dict)

    @property
    def risk_score(self):
        # the short class is positive, so its probability doubles as the risk
        return self.prob_short


@dataclass
class FoldResult:
    fold: int
    test_ids: list
    auroc: float
    c_index: float
    flags: tuple = ()


@dataclass
class CvSummary:
    folds: list
    predictions: list
    method: str = "HiGINE"
    stage_fusion: bool = False
    config_hash: str = ""

    def _stat(self, name, fn):
        vals = np.array([getattr(f, name) for f in self.folds], dtype=float)
        vals = vals[np.isfinite(vals)]
        return float(fn(vals)) if vals.size else float("nan")

    @property
    def auroc_mean(self):
        return self._stat("auroc", np.mean)

    @property
    def auroc_std(self):
        return self._stat("auroc", np.std)

    @property
    def c_index_mean(self):
        return self._stat("c_index", np.mean)

    @property
    def c_index_std(self):
        return self._stat("c_index", np.std)

    def to_dict(self):
        def num(x):
            return None if not np.isfinite(x) else round(float(x), 12)

        return {
            "method": self.method,
            "stage_fusion": self.stage_fusion,
            "config_hash": self.config_hash,
            "k": len(self.folds),
            "folds": [
                {"fold": f.fold, "n_test": len(f.test_ids), "test_patients": list(f.test_ids),
                 "auroc": num(f.auroc), "c_index": num(f.c_index), "flags": list(f.flags)}
                for f in self.folds
            ],
            "summary": {
                "auroc_mean": num(self.auroc_mean), "auroc_std": num(self.auroc_std),
                "c_index_mean": num(self.c_index_mean), "c_index_std": num(self.c_index_std),
            },
            "table_row": {
                "method": self.method,
                "cs": self.stage_fusion,
                "auroc": f"{self.auroc_mean:.3f}±{self.auroc_std:.2f}",
                "c_index": f"{self.c_index_mean:.3f}±{self.c_index_std:.2f}",
            },
        }


# -- folds -----------------------------------------------------------------

def stratified_kfold(patients, k, seed=0):
    """Patient-level folds stratified on (label, stage).

    ``patients`` is a sequence of ``(patient_id, label, stage_binary)``.
    Strata are shuffled independently and dealt round-robin, continuing
    the deal position across strata, so per-stratum fold counts differ by
    at most one and fold sizes stay balanced. Returns ``k`` lists of ids.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    patients = list(patients)
    if len(patients) < k:
        raise TooFewPatients(f"{len(patients)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    strata = {}
    for pid, label, stage in patients:
        strata.setdefault((int(label), bool(stage)), []).append(pid)
    folds = [[] for _ in range(k)]
    pos = 0
    for key in sorted(strata):
        ids = sorted(strata[key])
        if len(ids) < k:
            warnings.warn(f"stratum {key} has {len(ids)} patients, fewer than {k} folds", stacklevel=2)
        for pid in (ids[i] for i in rng.permutation(len(ids))):
            folds[pos % k].append(pid)
            pos += 1
    return [sorted(f) for f in folds]


def cohort_folds(cohort, k, seed=0):
    ids = cohort.labeled_ids()
    return stratified_kfold([(p, cohort.label(p), cohort.clinical[p].stage_binary) for p in ids], k, seed)


def split_validation(ids, labels, fraction, rng):
    """Label-stratified hold-out of roughly ``fraction`` of ``ids``."""
    ids = list(ids)
    if fraction <= 0 or len(ids) < 4:
        return ids, []
    labels = np.asarray(labels)
    val = []
    for c in np.unique(labels):
        members = [ids[i] for i in np.flatnonzero(labels == c)]
        n_val = int(round(fraction * len(members)))
        if len(members) >= 2:
            n_val = max(1, n_val)
        n_val = min(n_val, len(members) - 1)
        pick = rng.permutation(len(members))[:n_val]
        val.extend(members[i] for i in pick)
    val_set = set(val)
    return [p for p in ids if p not in val_set], sorted(val)


# -- features ----------------------------------------------------------------

@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray
    include_tissue: bool = True

    @classmethod
    def fit(cls, cores, kind=Normalization.ZSCORE, include_tissue=True):
        d = cores[0].features.shape[1]
        if Normalization(kind) is Normalization.NONE:
            return cls(np.zeros(d), np.ones(d), include_tissue)
        x = np.vstack([c.features for c in cores])
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0), include_tissue)

    def transform(self, core):
        z = (core.features - self.mean) / self.std
        if self.include_tissue and core.tissue_tumor is not None:
            z = np.column_stack([z, core.tissue_tumor.astype(np.float64)])
        return z

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "include_tissue": self.include_tissue}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), d["include_tissue"])


def build_structures(cohort, graph_config):
    """Subsample graphs (raw features) per core and overlap: ``[core][overlap] -> [Graph]``.

    Window placement and edges depend only on each core's own cells, so the
    result can be shared across folds.
    """
    return [[make_subsamples(core, graph_config, ov) for ov in graph_config.overlaps] for core in cohort.cores]


def _featurize(structures, cohort, normalizer, core_idx):
    feats = normalizer.transform(cohort.cores[core_idx])
    return [[g.with_features(feats[g.cell_index]) for g in graphs] for graphs in structures[core_idx]]


# -- training -----------------------------------------------------------------

def class_weights(labels, mode, n_classes=2):
    if ClassWeighting(mode) is ClassWeighting.NONE:
        return np.ones(n_classes)
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(float)
    present = counts > 0
    w = np.ones(n_classes)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def _eval_loss(graphs, labels, params, model_cfg, weights, extra=None, batch_size=64):
    total = 0.0
    for i in range(0, len(graphs), batch_size):
        ex = None if extra is None else extra[i:i + batch_size]
        logits, _ = forward_batch(GraphBatch.from_graphs(graphs[i:i + batch_size], ex), params, model_cfg)
        y = np.asarray(labels[i:i + batch_size], dtype=int)
        lsm = ad.log_softmax(logits.value)
        total += -(weights[y] * lsm[np.arange(len(y)), y]).sum()
    return total / len(graphs)


def train_model(graphs, labels, model_cfg, config, rng, val_graphs=(), val_labels=(), extra=None, val_extra=None):
    """Adam training with early stopping on validation loss.

    Falls back to the training loss (inference mode) when there is no
    validation set. Returns ``(best_params, log)``.
    """
    if len(graphs) == 0:
        raise NoTrainingData("no training graphs")
    labels = np.asarray(labels, dtype=int)
    params = init_params(model_cfg, rng)
    tensors = params.tensors()
    weights = class_weights(labels, config.class_weighting, model_cfg.n_classes)
    state = ad.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    best_loss, best_state, wait = np.inf, params.state(), 0
    history = []
    n = len(graphs)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            ex = None if extra is None else np.asarray(extra)[idx]
            batch = GraphBatch.from_graphs([graphs[i] for i in idx], ex)
            for t in tensors:
                t.zero_grad()
            with ad.Tape() as tape:
                logits, _ = forward_batch(batch, params, model_cfg, training=True, rng=rng)
                loss = ad.softmax_cross_entropy(logits, labels[idx], weights)
            tape.backward(loss)
            ad.adam_step(tensors, [t.grad for t in tensors], state)
            running += loss.item() * len(idx)
        if len(val_graphs):
            monitor = _eval_loss(val_graphs, val_labels, params, model_cfg, weights, val_extra)
        else:
            monitor = _eval_loss(graphs, labels, params, model_cfg, weights, extra)
        history.append({"epoch": epoch, "train_loss": running / n, "monitor_loss": float(monitor)})
        if monitor < best_loss - 1e-12:
            best_loss, best_state, wait = monitor, params.state(), 0
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                break
    params.load_state(best_state)
    return params, history


def train_subsample_model(graphs, labels, config, rng, val_graphs=(), val_labels=()):
    in_dim = graphs[0].node_features.shape[1] if graphs else 1
    model_cfg = config.model_config("subsample", in_dim)
    params, history = train_model(graphs, labels, model_cfg, config, rng, val_graphs, val_labels)
    return model_cfg, params, history


def extract_embeddings(params, model_cfg, graphs):
    """Penultimate activations (inference mode), one row per graph."""
    return embed(list(graphs), params, model_cfg)


def assemble_core_graphs(core_subgraphs, sub_params, sub_cfg, graph_config, stage=None):
    """One core graph per overlap setting, nodes carrying subsample embeddings.

    ``core_subgraphs`` is ``[overlap] -> [Graph]`` for a single core;
    ``stage`` (bool or None) is attached as a trailing node feature.
    """
    out = []
    for graphs in core_subgraphs:
        emb = extract_embeddings(sub_params, sub_cfg, graphs)
        g = build_core_graph(graphs, emb, graph_config)
        if stage is not None:
            g = attach_stage_feature(g, stage)
        out.append(g)
    return out


def train_core_model(graphs, labels, config, rng, val_graphs=(), val_labels=()):
    model_cfg = config.model_config("core", graphs[0].node_features.shape[1])
    params, history = train_model(graphs, labels, model_cfg, config, rng, val_graphs, val_labels)
    return model_cfg, params, history


def aggregate_patient_score(probs_by_core, patient_id=""):
    """Unweighted mean over every (core, augmentation) probability."""
    flat = [float(p) for probs in probs_by_core.values() for p in np.ravel(probs)]
    if not flat:
        raise NoPredictions(f"no predictions for patient {patient_id!r}")
    return PatientPrediction(patient_id, float(np.mean(flat)), {k: list(map(float, np.ravel(v)))
                                                                  for k, v in probs_by_core.items()})


# -- fitted model ----------------------------------------------------------------

@dataclass
class FittedHierarchy:
    config: TrainConfig
    normalizer: FeatureNormalizer
    sub_config: ModelConfig
    sub_params: object
    core_config: ModelConfig | None = None
    core_params: object = None
    history: dict = field(default_factory=dict)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / "subsample.ckpt", self.sub_params.state(), self.sub_config.to_dict())
        if self.core_params is not None:
            save_checkpoint(d / "core.ckpt", self.core_params.state(), self.core_config.to_dict())
        meta = {
            "train_config": self.config.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
        }
        (d / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        config = TrainConfig.from_dict(meta["train_config"])
        sub_state, sub_cfg, _ = load_checkpoint(d / "subsample.ckpt")
        sub_config = ModelConfig(**sub_cfg)
        sub_params = init_params(sub_config, np.random.default_rng(0))
        sub_params.load_state(sub_state)
        core_config = core_params = None
        if (d / "core.ckpt").exists():
            core_state, core_cfg, _ = load_checkpoint(d / "core.ckpt")
            core_config = ModelConfig(**core_cfg)
            core_params = init_params(core_config, np.random.default_rng(0))
            core_params.load_state(core_state)
        return cls(config, FeatureNormalizer.from_dict(meta["normalizer"]), sub_config, sub_params,
                   core_config, core_params, train_ids=meta["train_ids"], val_ids=meta["val_ids"])


def _subgraphs_for(cohort, structures, normalizer, ids):
    """Featurized ``[overlap] -> [Graph]`` per core index, for the cores of ``ids``."""
    wanted = set(ids)
    return {i: _featurize(structures, cohort, normalizer, i)
            for i, c in enumerate(cohort.cores) if c.patient_id in wanted}


def _fit_stage_one(cohort, train_ids, config, rng, structures):
    train_ids = sorted(train_ids)
    if not train_ids:
        raise NoTrainingData("no training patients")
    inner, val = split_validation(train_ids, [cohort.label(p) for p in train_ids], config.val_fraction, rng)
    train_cores = [c for c in cohort.cores if c.patient_id in set(train_ids)]
    normalizer = FeatureNormalizer.fit(train_cores, config.normalization, config.graph.include_tissue)
    subgraphs = _subgraphs_for(cohort, structures, normalizer, train_ids)

    def flat(ids):
        gs, ys = [], []
        for i, per_overlap in subgraphs.items():
            pid = cohort.cores[i].patient_id
            if pid in ids:
                for graphs in per_overlap:
                    gs.extend(graphs)
                    ys.extend([cohort.label(pid)] * len(graphs))
        return gs, ys

    tr_g, tr_y = flat(set(inner))
    va_g, va_y = flat(set(val))
    sub_cfg, sub_params, history = train_subsample_model(tr_g, tr_y, config, rng, va_g, va_y)
    log.info("stage one: %d training graphs, %d validation graphs, %d epochs",
             len(tr_g), len(va_g), len(history))
    return FittedHierarchy(config, normalizer, sub_cfg, sub_params, history={"subsample": history},
                           train_ids=inner, val_ids=val), subgraphs


def _core_graphs(fitted, cohort, subgraphs, fusion):
    out = {}
    for i, per_overlap in subgraphs.items():
        stage = cohort.clinical[cohort.cores[i].patient_id].stage_binary if fusion else None
        out[i] = assemble_core_graphs(per_overlap, fitted.sub_params, fitted.sub_config, fitted.config.graph, stage)
    return out


def _fit_stage_two(fitted, cohort, subgraphs, fusion, rng):
    core_graphs = _core_graphs(fitted, cohort, subgraphs, fusion)

    def flat(ids):
        gs, ys = [], []
        for i, graphs in core_graphs.items():
            pid = cohort.cores[i].patient_id
            if pid in ids:
                gs.extend(graphs)
                ys.extend([cohort.label(pid)] * len(graphs))
        return gs, ys

    tr_g, tr_y = flat(set(fitted.train_ids))
    va_g, va_y = flat(set(fitted.val_ids))
    core_cfg, core_params, history = train_core_model(tr_g, tr_y, fitted.config, rng, va_g, va_y)
    return FittedHierarchy(fitted.config, fitted.normalizer, fitted.sub_config, fitted.sub_params,
                           core_cfg, core_params, {**fitted.history, "core": history},
                           fitted.train_ids, fitted.val_ids)


def fit_hierarchy(cohort, train_ids, config, rng=None, structures=None):
    """Train both levels on ``train_ids`` (a validation slice is held out internally)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    structures = build_structures(cohort, config.graph) if structures is None else structures
    fitted, subgraphs = _fit_stage_one(cohort, train_ids, config, rng, structures)
    if not config.use_hierarchy:
        return fitted
    return _fit_stage_two(fitted, cohort, subgraphs, config.use_stage_fusion, rng)


def predict_patients(fitted, cohort, patient_ids, structures=None):
    """Patient-level predictions from a fitted model (hierarchical or subsample-only)."""
    config = fitted.config
    structures = build_structures(cohort, config.graph) if structures is None else structures
    subgraphs = _subgraphs_for(cohort, structures, fitted.normalizer, patient_ids)
    use_core = fitted.core_params is not None
    fusion = use_core and fitted.core_config.in_dim == fitted.sub_config.embed_dim + 1
    by_patient = {}
    for i, per_overlap in subgraphs.items():
        core = cohort.cores[i]
        if use_core:
            stage = cohort.clinical[core.patient_id].stage_binary if fusion else None
            graphs = assemble_core_graphs(per_overlap, fitted.sub_params, fitted.sub_config, config.graph, stage)
            probs = predict_proba(graphs, fitted.core_params, fitted.core_config)
        else:
            graphs = [g for gs in per_overlap for g in gs]
            probs = predict_proba(graphs, fitted.sub_params, fitted.sub_config)
        by_patient.setdefault(core.patient_id, {})[core.core_id] = probs
    return [aggregate_patient_score(by_patient[p], p) for p in sorted(patient_ids) if p in by_patient]


# -- evaluation -----------------------------------------------------------------

def evaluate_predictions(predictions, clinical):
    """``(auroc, c_index, flags)`` of patient predictions.

    Undefined metrics are NaN and named in ``flags``: ``single_class`` when
    the fold holds one label, ``single_score`` when every risk is equal (the
    ranking is uninformative, so AUROC is withheld), ``no_comparable_pairs``.
    """
    labels = [int(clinical[p.patient_id].label) for p in predictions]
    risk = [p.risk_score for p in predictions]
    time = [clinical[p.patient_id].follow_up for p in predictions]
    event = [clinical[p.patient_id].event for p in predictions]
    flags = []
    a = c = float("nan")
    if len(set(risk)) <= 1:
        flags.append("single_score")
    else:
        try:
            a = auroc(labels, risk)
        except SingleClass:
            flags.append("single_class")
    try:
        c = c_index(risk=risk, time=time, event=event)
    except NoComparablePairs:
        flags.append("no_comparable_pairs")
    return a, c, tuple(flags)


@dataclass(frozen=True)
class Variant:
    name: str
    use_hierarchy: bool = True
    use_stage_fusion: bool = False


def _run_fold(args):
    cohort, config, fold, test_ids, seq, structures, variants, out_dir = args
    rng = np.random.default_rng(seq)
    train_ids = sorted(set(cohort.labeled_ids()) - set(test_ids))
    stage_one, subgraphs = _fit_stage_one(cohort, train_ids, config, rng, structures)
    stage_one_state = rng.bit_generator.state
    results = {}
    for v in variants:
        # every variant's second stage starts from the same generator state
        rng.bit_generator.state = stage_one_state
        if v.use_hierarchy:
            fitted = _fit_stage_two(stage_one, cohort, subgraphs, v.use_stage_fusion, rng)
        else:
            fitted = stage_one
        preds = predict_patients(fitted, cohort, test_ids, structures)
        a, c, flags = evaluate_predictions(preds, cohort.clinical)
        if out_dir is not None:
            fold_dir = Path(out_dir) / v.name / f"fold_{fold}"
            fitted.save(fold_dir)
            manifest = {
                "fold": fold,
                "train_ids": train_ids,
                "test_ids": list(test_ids),
                "inner_train_ids": fitted.train_ids,
                "val_ids": fitted.val_ids,
                "config_hash": config_hash(config.to_dict()),
                "checkpoints": sorted(p.name for p in fold_dir.glob("*.ckpt")),
            }
            (fold_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        results[v.name] = (FoldResult(fold, list(test_ids), a, c, flags), preds)
    return results


def run_variants_cv(cohort, config, k, variants, out_dir=None, jobs=1, structures=None):
    """k-fold CV of several stage-two variants sharing one stage-one fit per fold."""
    folds = cohort_folds(cohort, k, config.seed)
    structures = build_structures(cohort, config.graph) if structures is None else structures
    seqs = np.random.SeedSequence(config.seed).spawn(k)
    tasks = [(cohort, config, i, f, seqs[i], structures, tuple(variants), out_dir) for i, f in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_fold = list(pool.map(_run_fold, tasks))
    else:
        per_fold = [_run_fold(t) for t in tasks]
    h = config_hash(config.to_dict())
    out = {}
    for v in variants:
        results = [r[v.name][0] for r in per_fold]
        preds = [p for r in per_fold for p in r[v.name][1]]
        method = "HiGINE" if v.use_hierarchy else "HiGINE-flat"
        out[v.name] = CvSummary(results, preds, method, v.use_stage_fusion, h)
    return out


def run_cv(cohort, config, k, out_dir=None, jobs=1, structures=None, metrics_extra=None):
    """Full k-fold CV of the configured model.

    With ``out_dir`` the per-fold models and manifests go to
    ``out_dir/model/fold_<i>``, next to ``predictions.csv`` and ``metrics.json``.
    """
    v = Variant("model", config.use_hierarchy, config.use_stage_fusion and config.use_hierarchy)
    summary = run_variants_cv(cohort, config, k, [v], out_dir, jobs, structures)["model"]
    if out_dir is not None:
        write_predictions(Path(out_dir) / "predictions.csv", summary.predictions, cohort.clinical)
        write_metrics(Path(out_dir) / "metrics.json", summary, metrics_extra)
    return summary


def write_predictions(path, predictions, clinical):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "prob_short", "label", "follow_up_days", "event"])
        for p in sorted(predictions, key=lambda p: p.patient_id):
            r = clinical.get(p.patient_id)
            label = "" if r is None or r.label is None else Label(r.label).name.capitalize()
            w.writerow([p.patient_id, repr(float(p.prob_short)), label,
                        "" if r is None else repr(float(r.follow_up)), "" if r is None else int(r.event)])


def read_predictions(path):
    """Rows of a predictions CSV as ``(PatientPrediction, ClinicalRecord)`` pairs."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            label = {"Short": Label.SHORT, "Long": Label.LONG}.get(row["label"])
            rec = ClinicalRecord(row["patient_id"], float(row["follow_up_days"]), row["event"] == "1", False, label)
            out.append((PatientPrediction(row["patient_id"], float(row["prob_short"])), rec))
    return out


def write_metrics(path, summary, extra=None):
    d = summary.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
