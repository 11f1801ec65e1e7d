import numpy as np
import pandas as pd
import pytest

from higine.cell_table import (
    CensorPolicy, ClinicalRecord, CohortConfig, Core, Label, dataset1_config, dataset2_config, derive_binary_label,
    load_cell_table, load_clinical, months_to_days, parse_stage, write_cell_table, write_clinical,
)
from higine.errors import ConfigError, DataError, DuplicatePatient, EmptyCore, MissingColumn, NonFiniteValue


def mif_frame():
    return pd.DataFrame({
        "patient_id": ["p2", "p1", "p1", "p1"],
        "core_id": ["a", "b", "a", "a"],
        "cell_id": [0, 1, 2, 3],
        "x": [0.0, 1.0, 2.0, 3.0],
        "y": [0.0, 0.0, 1.0, 1.0],
        "CD8": [0.5, 1.0, 0.0, 2.0],
        "area": [10.0, 12.0, 11.0, 9.0],
        "tissue_category": ["Tumor", "Stroma", "tumor", "Stroma"],
    })


def test_label_threshold_is_inclusive():
    assert derive_binary_label(1730, True, 1730) is Label.LONG
    assert derive_binary_label(1729.9, True, 1730) is Label.SHORT
    assert derive_binary_label(5000, False, 1730) is Label.LONG


def test_censored_short_policy():
    assert derive_binary_label(100, False, 1730) is None
    assert derive_binary_label(100, False, 1730, CensorPolicy.KEEP_ALL) is Label.SHORT
    with pytest.raises(DataError):
        derive_binary_label(-1, True, 1730)


def test_month_threshold():
    cfg = dataset2_config(["T", "B"])
    assert cfg.label_threshold == pytest.approx(36 * 365.25 / 12)
    assert derive_binary_label(months_to_days(36) - 1, True, cfg.label_threshold) is Label.SHORT


@pytest.mark.parametrize("raw,stage", [("I", 1), ("IIIA", 3), ("Stage IB", 1), ("4", 4), ("iv", 4)])
def test_parse_stage(raw, stage):
    assert parse_stage(raw) == stage


def test_parse_stage_rejects_garbage():
    with pytest.raises(DataError):
        parse_stage("unknown")


def test_load_mif_style_table(tmp_path):
    path = tmp_path / "cells.csv"
    mif_frame().to_csv(path, index=False)
    cores = load_cell_table(path, dataset1_config(["CD8", "area"], um_per_unit=0.5))
    assert [(c.patient_id, c.core_id) for c in cores] == [("p1", "a"), ("p1", "b"), ("p2", "a")]
    a = cores[0]
    np.testing.assert_allclose(a.coords_um, [[1.0, 0.5], [1.5, 0.5]])
    np.testing.assert_array_equal(a.tissue_tumor, [True, False])
    assert a.node_features().shape == (2, 3)
    assert a.node_features(include_tissue=False).shape == (2, 2)


def test_onehot_phenotypes(tmp_path):
    df = pd.DataFrame({"patient_id": ["p"] * 3, "core_id": ["c"] * 3, "x": [0, 1, 2], "y": [0, 0, 0],
                       "phenotype": ["B", "T", "B"]})
    df.to_csv(tmp_path / "c.csv", index=False)
    (core,) = load_cell_table(tmp_path / "c.csv", dataset2_config(["T", "B"]))
    np.testing.assert_array_equal(core.features, [[0, 1], [1, 0], [0, 1]])
    assert core.feature_names == ("phenotype=T", "phenotype=B")
    df.loc[1, "phenotype"] = "Macrophage"
    df.to_csv(tmp_path / "c.csv", index=False)
    with pytest.raises(DataError):
        load_cell_table(tmp_path / "c.csv", dataset2_config(["T", "B"]))


def test_missing_column_and_non_finite_row(tmp_path):
    df = mif_frame()
    df.drop(columns="CD8").to_csv(tmp_path / "a.csv", index=False)
    with pytest.raises(MissingColumn):
        load_cell_table(tmp_path / "a.csv", dataset1_config(["CD8", "area"]))
    df.loc[2, "area"] = np.nan
    df.to_csv(tmp_path / "b.csv", index=False)
    with pytest.raises(NonFiniteValue) as err:
        load_cell_table(tmp_path / "b.csv", dataset1_config(["CD8", "area"]))
    assert err.value.row == 2


def test_clinical_loading(tmp_path):
    pd.DataFrame({
        "patient_id": ["a", "b", "c"],
        "follow_up_days": [100, 2000, 50],
        "event": ["1", "0", "false"],
        "stage": ["IIB", "I", "IIIA"],
    }).to_csv(tmp_path / "clin.csv", index=False)
    recs = {r.patient_id: r for r in load_clinical(tmp_path / "clin.csv", dataset1_config(["x"]))}
    assert recs["a"].label is Label.SHORT and recs["a"].stage_binary
    assert recs["b"].label is Label.LONG and not recs["b"].stage_binary
    assert recs["c"].label is None


def test_duplicate_patient(tmp_path):
    pd.DataFrame({"patient_id": ["a", "a"], "follow_up_days": [1, 2], "event": [1, 1],
                  "stage": ["I", "I"]}).to_csv(tmp_path / "clin.csv", index=False)
    with pytest.raises(DuplicatePatient):
        load_clinical(tmp_path / "clin.csv", dataset1_config(["x"]))


def test_core_validation():
    with pytest.raises(EmptyCore):
        Core("c", "p", np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(DataError):
        Core("c", "p", np.zeros((2, 2)), np.zeros((3, 1)))


def test_config_from_dict():
    cfg = CohortConfig.from_dict({"feature_columns": ["a"], "label_threshold_months": 36,
                                  "stage_split": ["III", "IV"], "columns": {"x": "X_um"}})
    assert cfg.high_stages == ("III", "IV") and cfg.columns["x"] == "X_um" and cfg.columns["y"] == "y"
    assert CohortConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        CohortConfig.from_dict({"feature_columns": ["a"], "bogus": 1})
    with pytest.raises(ConfigError):
        CohortConfig()


def test_roundtrip_writers(tmp_path):
    cfg = dataset2_config(["T", "B"])
    core = Core("c0", "p0", np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                feature_names=("phenotype=T", "phenotype=B"))
    write_cell_table(tmp_path / "cells.csv", [core], cfg)
    (back,) = load_cell_table(tmp_path / "cells.csv", cfg)
    np.testing.assert_array_equal(back.features, core.features)
    np.testing.assert_array_equal(back.coords_um, core.coords_um)
    write_clinical(tmp_path / "clin.csv", [ClinicalRecord("p0", 400.0, True, True, Label.SHORT)], cfg)
    (rec,) = load_clinical(tmp_path / "clin.csv", cfg)
    assert rec.stage_binary and rec.label is Label.SHORT


def test_months_follow_up_and_coded_events(tmp_path):
    pd.DataFrame({
        "patient_id": ["a", "b"],
        "follow_up_days": [35.0, 40.0],
        "event": ["1:DECEASED", "0:LIVING"],
        "stage": ["3.0", "1.0"],
    }).to_csv(tmp_path / "clin.csv", index=False)
    cfg = dataset2_config(["T"], follow_up_unit="months")
    a, b = load_clinical(tmp_path / "clin.csv", cfg)
    assert a.follow_up == pytest.approx(months_to_days(35)) and a.event and a.label is Label.SHORT
    assert not b.event and b.label is Label.LONG and a.stage_binary and not b.stage_binary
    with pytest.raises(ConfigError):
        dataset2_config(["T"], follow_up_unit="weeks")
