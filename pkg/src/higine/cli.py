"""Command-line entry point: ``higine <subcommand> [options]``.

Settings resolve as command-line flag, then the TOML file given with
``--config``, then built-in defaults. Relative paths inside a config file
are taken relative to that file. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .baselines import METHODS, run_baseline_cv
from .cell_table import CohortConfig, load_cell_table, load_clinical, write_cell_table, write_clinical
from .checkpoint import config_hash
from .errors import ConfigError, DataError, HigineError, NonConvergence, NumericError
from .graph_builder import save_graphs
from .pipeline import (
    Cohort, FittedHierarchy, TrainConfig, build_structures, fit_hierarchy,
    predict_patients, read_predictions, run_cv, write_metrics, write_predictions,
)

log = logging.getLogger("higine")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- configuration -----------------------------------------------------------------

def load_config_file(path):
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        with open(p, "rb") as f:
            return tomllib.load(f), p.resolve().parent
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e


class Settings:
    """Resolved run settings for one invocation."""

    def __init__(self, args):
        raw, base = load_config_file(getattr(args, "config", None))
        unknown = set(raw) - {"data", "cohort", "train", "baseline", "synth"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        self.raw = raw
        data = raw.get("data", {})

        def path(flag, key):
            v = getattr(args, flag, None)
            if v is not None:
                return Path(v)
            if key in data:
                return base / data[key]
            return None

        self.cells = path("cells", "cells")
        self.clinical = path("clinical", "clinical")
        self.cohort = CohortConfig.from_dict(raw["cohort"]) if "cohort" in raw else None

        train = {k: v for k, v in raw.get("train", {}).items() if k != "k"}
        if getattr(args, "seed", None) is not None:
            train["seed"] = args.seed
        if getattr(args, "no_edges", False):
            train["use_edge_weights"] = False
        if getattr(args, "no_hierarchy", False):
            train["use_hierarchy"] = False
        if getattr(args, "fuse_stage", False):
            train["use_stage_fusion"] = True
        try:
            self.train = TrainConfig.from_dict(train)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        self.k = args.k if getattr(args, "k", None) is not None else int(raw.get("train", {}).get("k", 5))

    def cohort_config(self):
        if self.cohort is None:
            raise ConfigError("a [cohort] section is required to read cell tables")
        return self.cohort

    def load_cohort(self):
        if self.cells is None or self.clinical is None:
            raise ConfigError("cell and clinical tables are required (--cells/--clinical or [data])")
        cfg = self.cohort_config()
        for p in (self.cells, self.clinical):
            if not p.exists():
                raise DataError(f"input file not found: {p}")
        cores = load_cell_table(self.cells, cfg)
        clinical = {r.patient_id: r for r in load_clinical(self.clinical, cfg)}
        orphans = sorted({c.patient_id for c in cores} - set(clinical))
        if orphans:
            raise DataError(f"cores without a clinical record, e.g. patient {orphans[0]!r}")
        return Cohort(cores, clinical)

    def resolved(self):
        """Everything that influences results, in a JSON-able form."""
        return {
            "cohort": None if self.cohort is None else self.cohort.to_dict(),
            "train": self.train.to_dict(),
            "k": self.k,
        }


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_manifest(out, command, settings, argv, outputs):
    """RunManifest: written before any training so partial runs stay traceable."""
    inputs = {}
    for name in ("cells", "clinical"):
        p = getattr(settings, name)
        if p is not None and p.exists():
            inputs[name] = {"path": str(p), "sha256": _sha256(p)}
    manifest = {
        "command": command,
        "argv": list(argv),
        "tool_version": __version__,
        "config": settings.resolved(),
        "config_hash": config_hash(settings.resolved()),
        "seed": settings.train.seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    _dump_json(Path(out) / "run_manifest.json", manifest)
    return manifest


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------------

def cmd_ingest(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    recs = list(cohort.clinical.values())
    with_cores = {c.patient_id for c in cohort.cores}
    summary = {
        "n_patients": len(recs),
        "n_patients_with_cores": len(with_cores),
        "n_cores": len(cohort.cores),
        "n_cells": int(sum(c.n_cells for c in cohort.cores)),
        "cells_per_core": {
            "min": int(min(c.n_cells for c in cohort.cores)),
            "max": int(max(c.n_cells for c in cohort.cores)),
        },
        "feature_names": list(cohort.cores[0].feature_names),
        "labels": {
            "short": sum(r.label is not None and int(r.label) == 1 for r in recs),
            "long": sum(r.label is not None and int(r.label) == 0 for r in recs),
            "excluded": sum(r.label is None for r in recs),
        },
        "stage_high": sum(bool(r.stage_binary) for r in recs),
        "events": sum(bool(r.event) for r in recs),
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_build_graphs(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    out = _out_dir(args)
    structures = build_structures(cohort, s.train.graph)
    index = []
    for core, per_overlap in zip(cohort.cores, structures):
        for ov, graphs in zip(s.train.graph.overlaps, per_overlap):
            name = f"{core.patient_id}__{core.core_id}__ov{int(round(ov * 100)):02d}.npz"
            save_graphs(out / name, graphs)
            index.append({"patient_id": core.patient_id, "core_id": core.core_id, "overlap": ov,
                          "n_graphs": len(graphs), "file": name})
    _dump_json(out / "graphs_index.json", {"graph_config": s.train.to_dict()["graph"], "files": index})
    print(f"wrote {len(index)} graph files to {out}")
    return EXIT_OK


def _patient_list(arg, cohort):
    if arg is None:
        return cohort.labeled_ids()
    p = Path(arg)
    ids = p.read_text().split() if p.exists() else arg.split(",")
    missing = sorted(set(ids) - set(cohort.clinical))
    if missing:
        raise DataError(f"unknown patient ids: {missing[:5]}")
    return sorted(ids)


def cmd_train(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    out = _out_dir(args)
    ids = _patient_list(args.patients, cohort)
    ids = [p for p in ids if cohort.clinical[p].label is not None]
    write_manifest(out, "train", s, argv, ["model/", "train_log.json"])
    fitted = fit_hierarchy(cohort, ids, s.train)
    fitted.save(out / "model")
    _dump_json(out / "train_log.json", {"manifest": "run_manifest.json", "history": fitted.history})
    print(f"trained on {len(ids)} patients; model saved to {out / 'model'}")
    return EXIT_OK


def cmd_predict(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    fitted = FittedHierarchy.load(args.model)
    ids = _patient_list(args.patients, cohort) if args.patients else sorted({c.patient_id for c in cohort.cores})
    preds = predict_patients(fitted, cohort, ids)
    write_predictions(args.out, preds, cohort.clinical)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def _print_table(summaries):
    print(f"{'Method':<14}{'CS':<5}{'AUROC':<16}{'c-index':<16}")
    for s in summaries:
        row = s.to_dict()["table_row"]
        print(f"{row['method']:<14}{'yes' if row['cs'] else '-':<5}{row['auroc']:<16}{row['c_index']:<16}")


def cmd_cv(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    out = _out_dir(args)
    write_manifest(out, "cv", s, argv, ["metrics.json", "predictions.csv", "model/"])
    variant = {
        "edges": s.train.use_edge_weights,
        "hierarchy": s.train.use_hierarchy,
        "stage_fusion": s.train.use_stage_fusion and s.train.use_hierarchy,
    }
    summary = run_cv(cohort, s.train, s.k, out_dir=out, jobs=args.jobs,
                     metrics_extra={"manifest": "run_manifest.json", "variant": variant})
    _print_table([summary])
    return EXIT_OK


def cmd_baseline(args, argv):
    s = Settings(args)
    cohort = s.load_cohort()
    out = _out_dir(args)
    opts = dict(s.raw.get("baseline", {}))
    if args.split_by_tissue:
        opts["split_by_tissue"] = True
    if "grid" in opts:
        opts["grid"] = [tuple(g) for g in opts["grid"]]
    allowed = {"split_by_tissue", "l2", "c", "grid", "nested_k"}
    if set(opts) - allowed:
        raise ConfigError(f"unknown baseline options: {sorted(set(opts) - allowed)}")
    write_manifest(out, f"baseline:{args.method}", s, argv, ["metrics.json", "predictions.csv"])
    summary = run_baseline_cv(cohort, args.method, s.k, s.train, fuse_stage=args.fuse_stage, **opts)
    write_predictions(out / "predictions.csv", summary.predictions, cohort.clinical)
    write_metrics(out / "metrics.json", summary, {"manifest": "run_manifest.json"})
    _print_table([summary])
    return EXIT_OK


def _km_rows(curve):
    rows = [(0.0, 1.0, int(curve.at_risk[0]) if curve.at_risk.size else 0, 0)]
    rows += [(float(t), float(s), int(n), int(d))
             for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events)]
    return rows


def cmd_km(args, argv):
    from .survival_metrics import SurvivalSample, cox_binary_hr, km_curve, logrank

    out = _out_dir(args)
    rows = read_predictions(args.predictions)
    if not rows:
        raise DataError(f"{args.predictions}: no predictions")
    samples = [SurvivalSample(p.risk_score, r.follow_up, r.event, int(p.prob_short >= args.threshold))
               for p, r in rows]
    short = [x for x in samples if x.group == 1]
    long_ = [x for x in samples if x.group == 0]
    if not short or not long_:
        raise DataError(f"threshold {args.threshold} leaves one predicted group empty")
    report = {
        "threshold": args.threshold,
        "group_coding": {"1": "predicted_short (prob_short >= threshold)", "0": "predicted_long"},
        "hr_reference": "hazard of group 1 relative to group 0",
        "n": {"predicted_short": len(short), "predicted_long": len(long_)},
    }
    curves = {}
    for name, grp in (("predicted_short", short), ("predicted_long", long_)):
        curves[name] = km_curve(grp)
        with open(out / f"km_{name}.csv", "w") as f:
            f.write("time,survival,at_risk,events\n")
            for t, sv, n, d in _km_rows(curves[name]):
                f.write(f"{t!r},{sv!r},{n},{d}\n")
    chi2, p = logrank(short, long_)
    report.update({"chi2": chi2, "p": p})
    status = EXIT_OK
    try:
        beta, hr, se = cox_binary_hr(samples)
        report.update({"beta": beta, "hr": hr, "se": se, "cox_status": "converged"})
    except NonConvergence as e:
        report.update({"beta": None, "hr": None, "se": None, "cox_status": f"non_convergence: {e}"})
        status = EXIT_NUMERIC
    _dump_json(out / "km.json", report)
    if args.plot:
        _plot_km(curves, out / "km.svg", p)
    print(json.dumps({k: report[k] for k in ("chi2", "p", "beta", "hr", "se")}))
    return status


def _plot_km(curves, path, p):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "higine"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        rows = _km_rows(curve)
        ax.step([r[0] for r in rows], [r[1] for r in rows], where="post", label=name.replace("_", " "))
    ax.set_xlabel("days")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"log-rank p = {p:.2g}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_synth(args, argv):
    from .synth import SynthConfig, cohort_config, generate_cohort

    raw, _ = load_config_file(args.config)
    params = dict(raw.get("synth", {}))
    for key in ("seed", "n_patients", "mixing_strength", "stage_signal", "censor_rate", "spatial_penetrance",
                "n_cell_types"):
        v = getattr(args, key, None)
        if v is not None:
            params[key] = v
    try:
        config = SynthConfig(**params)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(args)
    cores, clinical = generate_cohort(config)
    ccfg = cohort_config(config)
    write_cell_table(out / "cells.csv", cores, ccfg)
    write_clinical(out / "clinical.csv", clinical, ccfg)
    cats = ", ".join(f'"{c}"' for c in ccfg.onehot_categories)
    (out / "cohort.toml").write_text(
        "# generated by `higine synth`\n"
        "[data]\ncells = \"cells.csv\"\nclinical = \"clinical.csv\"\n\n"
        f"[cohort]\nlabel_threshold_days = {ccfg.label_threshold!r}\n"
        f"onehot_column = \"{ccfg.onehot_column}\"\nonehot_categories = [{cats}]\n"
        "stage_split = [\"III\", \"IV\"]\n"
    )
    _dump_json(out / "synth.json", config.to_dict())
    print(f"wrote {len(clinical)} patients / {len(cores)} cores to {out}")
    return EXIT_OK


def grad_check_suite(seed=0, n_graphs=20, n_nodes=12, in_dim=3, hidden=4):
    """Finite-difference check of the full GINE + SAG + MLP model on random graphs."""
    from . import autodiff as ad
    from .gnn_model import GraphBatch, ModelConfig, forward_batch, init_params
    from .graph_builder import Graph, radius_edges

    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(n_graphs):
        coords = rng.uniform(0, 40, size=(n_nodes, 2))
        edges, weights = radius_edges(coords, 20.0)
        graphs.append(Graph(rng.normal(size=(n_nodes, in_dim)), coords, edges, weights))
    labels = rng.integers(0, 2, size=n_graphs)
    cfg = ModelConfig(in_dim=in_dim, hidden_dim=hidden, n_conv_layers=2, dropout_p=0.0)
    params = init_params(cfg, rng)
    for t in params.tensors():
        # nonzero eps and biases exercise every path
        t.value = t.value + rng.normal(scale=0.1, size=t.shape)
    batch = GraphBatch.from_graphs(graphs)

    def forward():
        logits, _ = forward_batch(batch, params, cfg)
        return ad.softmax_cross_entropy(logits, labels)

    return ad.grad_check(forward, params.tensors())


def cmd_grad_check(args, argv):
    import time

    t0 = time.perf_counter()
    report = grad_check_suite(args.seed if args.seed is not None else 0)
    elapsed = time.perf_counter() - t0
    ok = report.passed(args.tolerance)
    result = {
        "max_rel_error": report.max_rel_error,
        "n_checked": report.n_checked,
        "tolerance": args.tolerance,
        "passed": ok,
        "per_param": {k: float(v) for k, v in sorted(report.per_param.items())},
    }
    if args.out:
        _dump_json(args.out, result)
    print(f"grad-check: max relative error {report.max_rel_error:.3e} over {report.n_checked} entries "
          f"({'PASS' if ok else 'FAIL'}, {elapsed:.1f}s)")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="higine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--cells", help="per-cell CSV (overrides [data].cells)")
        sp.add_argument("--clinical", help="clinical CSV (overrides [data].clinical)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("ingest", help="validate and summarise a cohort")
    data_args(sp)
    sp.add_argument("--out", help="write the summary JSON here")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("build-graphs", help="build and cache subsample graphs")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_graphs)

    sp = sub.add_parser("train", help="fit both levels on a set of patients")
    data_args(sp)
    sp.add_argument("--patients", help="comma-separated ids or a file of ids (default: all labelled)")
    sp.add_argument("--no-edges", action="store_true")
    sp.add_argument("--no-hierarchy", action="store_true")
    sp.add_argument("--fuse-stage", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="score patients with a trained model")
    data_args(sp)
    sp.add_argument("--model", required=True, help="model directory written by `train`")
    sp.add_argument("--patients")
    sp.add_argument("--out", required=True, help="predictions CSV")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("cv", help="k-fold cross-validation of the hierarchical model")
    data_args(sp)
    sp.add_argument("--k", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-edges", action="store_true", help="GIN instead of edge-weighted GINE")
    sp.add_argument("--no-hierarchy", action="store_true", help="score patients from subsample graphs")
    sp.add_argument("--fuse-stage", action="store_true", help="append cancer stage to core-graph nodes")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("baseline", help="comparison methods on the same folds")
    data_args(sp)
    sp.add_argument("--method", required=True, choices=METHODS)
    sp.add_argument("--k", type=int)
    sp.add_argument("--fuse-stage", action="store_true")
    sp.add_argument("--split-by-tissue", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("km", help="Kaplan-Meier curves, log-rank test and hazard ratio")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--plot", action="store_true", help="also write km.svg")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_km)

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    sp.add_argument("--config", help="TOML file with a [synth] section")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-patients", dest="n_patients", type=int)
    sp.add_argument("--n-cell-types", dest="n_cell_types", type=int)
    sp.add_argument("--mixing-strength", dest="mixing_strength", type=float)
    sp.add_argument("--stage-signal", dest="stage_signal", type=float)
    sp.add_argument("--censor-rate", dest="censor_rate", type=float)
    sp.add_argument("--spatial-penetrance", dest="spatial_penetrance", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("grad-check", help="finite-difference check of the model gradients")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except HigineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
