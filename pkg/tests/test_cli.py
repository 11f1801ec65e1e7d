import json
from importlib import resources
from pathlib import Path

import jsonschema
import pandas as pd
import pytest

from higine.cli import main

TRAIN_TOML = """
[train]
seed = 3
k = 3
lr = 0.003
max_epochs = 2
early_stop_patience = 2
batch_size = 16

[train.graph]
n_target = 32

[train.subsample_model]
hidden_dim = 4

[train.core_model]
hidden_dim = 4
"""


def schema(name):
    return json.loads(resources.files("higine").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(path, name):
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, schema(name))
    return doc


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    (d / "synth.toml").write_text("[synth]\nn_patients = 12\ncells_per_core = [60, 80]\n")
    assert main(["synth", "--config", str(d / "synth.toml"), "--seed", "4", "--out", str(d)]) == 0
    (d / "run.toml").write_text((d / "cohort.toml").read_text() + TRAIN_TOML)
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_outputs(cohort_dir):
    for name in ("cells.csv", "clinical.csv", "cohort.toml", "synth.json"):
        assert (cohort_dir / name).exists()
    meta = json.loads((cohort_dir / "synth.json").read_text())
    assert meta["seed"] == 4 and meta["n_patients"] == 12
    assert len(pd.read_csv(cohort_dir / "clinical.csv")) == 12


def test_ingest_summary(cohort_dir, tmp_path):
    assert run("ingest", "--config", cohort_dir / "run.toml", "--out", tmp_path / "s.json") == 0
    doc = validate(tmp_path / "s.json", "ingest")
    assert doc["n_patients"] == 12 and doc["n_cores"] == 12
    assert doc["labels"]["short"] + doc["labels"]["long"] + doc["labels"]["excluded"] == 12


def test_build_graphs(cohort_dir, tmp_path):
    assert run("build-graphs", "--config", cohort_dir / "run.toml", "--out", tmp_path) == 0
    index = json.loads((tmp_path / "graphs_index.json").read_text())
    assert len(index["files"]) == 12 * 4 and index["graph_config"]["n_target"] == 32
    assert all((tmp_path / f["file"]).exists() and f["n_graphs"] >= 1 for f in index["files"])


def test_train_then_predict(cohort_dir, tmp_path):
    assert run("train", "--config", cohort_dir / "run.toml", "--out", tmp_path) == 0
    validate(tmp_path / "run_manifest.json", "run_manifest")
    assert (tmp_path / "model" / "core.ckpt").exists()
    assert run("predict", "--config", cohort_dir / "run.toml", "--model", tmp_path / "model",
               "--out", tmp_path / "p.csv") == 0
    df = pd.read_csv(tmp_path / "p.csv")
    assert len(df) == 12 and df["prob_short"].between(0, 1).all()


@pytest.fixture(scope="module")
def cv_runs(cohort_dir, tmp_path_factory):
    outs = []
    for _ in range(2):
        out = tmp_path_factory.mktemp("cv")
        assert run("cv", "--config", cohort_dir / "run.toml", "--fuse-stage", "--out", out) == 0
        outs.append(out)
    return outs


def test_cv_outputs_validate(cv_runs):
    out = cv_runs[0]
    metrics = validate(out / "metrics.json", "metrics")
    assert metrics["k"] == 3 and len(metrics["folds"]) == 3
    assert metrics["stage_fusion"] and metrics["variant"]["stage_fusion"]
    manifest = validate(out / "run_manifest.json", "run_manifest")
    assert manifest["seed"] == 3 and manifest["config"]["k"] == 3
    assert set(manifest["inputs"]) == {"cells", "clinical"}
    for i in range(3):
        validate(out / "model" / f"fold_{i}" / "manifest.json", "fold_manifest")


def test_cv_is_byte_identical_across_runs(cv_runs):
    a, b = cv_runs
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "predictions.csv").read_bytes() == (b / "predictions.csv").read_bytes()


def test_cv_prints_table(cohort_dir, tmp_path, capsys):
    assert run("cv", "--config", cohort_dir / "run.toml", "--no-hierarchy", "--no-edges", "--k", 2,
               "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["Method", "CS", "AUROC", "c-index"]
    assert "HiGINE-flat" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["k"] == 2 and metrics["variant"] == {"edges": False, "hierarchy": False, "stage_fusion": False}


def test_flag_overrides_config(cohort_dir, tmp_path):
    assert run("baseline", "--config", cohort_dir / "run.toml", "--method", "stage", "--seed", "9",
               "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["config"]["train"]["seed"] == 9


@pytest.mark.parametrize("method", ["logreg", "svc", "label"])
def test_baseline_deterministic(cohort_dir, tmp_path, method):
    for sub in ("a", "b"):
        assert run("baseline", "--config", cohort_dir / "run.toml", "--method", method, "--split-by-tissue",
                   "--out", tmp_path / sub) == 0
        validate(tmp_path / sub / "metrics.json", "metrics")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_km_report(cv_runs, tmp_path):
    assert run("km", "--predictions", cv_runs[0] / "predictions.csv", "--threshold", 0.5, "--out", tmp_path) in (0, 4)
    doc = validate(tmp_path / "km.json", "km")
    assert doc["n"]["predicted_short"] + doc["n"]["predicted_long"] == 12
    first = pd.read_csv(tmp_path / "km_predicted_short.csv").iloc[0]
    assert first["time"] == 0.0 and first["survival"] == 1.0


def test_km_separated_groups_exit_4(tmp_path):
    rows = ["patient_id,prob_short,label,follow_up_days,event"]
    rows += [f"s{i},0.9,Short,{100 + i}.0,1" for i in range(4)]
    rows += [f"l{i},0.1,Long,{3000 + i}.0,1" for i in range(4)]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    assert run("km", "--predictions", tmp_path / "p.csv", "--out", tmp_path / "km") == 4
    doc = validate(tmp_path / "km" / "km.json", "km")
    assert doc["hr"] is None and doc["cox_status"].startswith("non_convergence")
    assert doc["p"] < 0.05


def test_km_plot_is_deterministic(tmp_path):
    pytest.importorskip("matplotlib")
    rows = ["patient_id,prob_short,label,follow_up_days,event"]
    rows += [f"p{i},{0.2 + 0.07 * i},,{50.0 * (12 - i) + 7 * (i % 3)},{i % 2}" for i in range(10)]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    for sub in ("a", "b"):
        assert run("km", "--predictions", tmp_path / "p.csv", "--plot", "--out", tmp_path / sub) in (0, 4)
    assert (tmp_path / "a" / "km.svg").read_bytes() == (tmp_path / "b" / "km.svg").read_bytes()
    assert (tmp_path / "a" / "km.json").read_bytes() == (tmp_path / "b" / "km.json").read_bytes()


def test_grad_check(tmp_path, capsys):
    assert run("grad-check", "--out", tmp_path / "g.json") == 0
    doc = validate(tmp_path / "g.json", "grad_check")
    assert doc["passed"] and doc["max_rel_error"] <= 1e-4
    assert "PASS" in capsys.readouterr().out


def test_exit_codes(cohort_dir, tmp_path):
    assert run("cv", "--bogus-flag") == 2
    (tmp_path / "bad.toml").write_text("[train]\nlearning_rate = 1.0\n")
    assert run("cv", "--config", tmp_path / "bad.toml", "--out", tmp_path / "o") == 2
    (tmp_path / "broken.toml").write_text("[train\n")
    assert run("ingest", "--config", tmp_path / "broken.toml") == 2
    assert run("ingest", "--config", tmp_path / "missing.toml") == 2
    assert run("ingest", "--config", cohort_dir / "run.toml", "--cells", tmp_path / "nope.csv") == 3
    orphan = pd.read_csv(cohort_dir / "clinical.csv").iloc[1:]
    orphan.to_csv(tmp_path / "clin.csv", index=False)
    assert run("ingest", "--config", cohort_dir / "run.toml", "--clinical", tmp_path / "clin.csv") == 3
    assert run("km", "--predictions", tmp_path / "nope.csv", "--out", tmp_path / "k") == 3


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "higine", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("higine ")
