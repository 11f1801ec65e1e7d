"""Per-cell tables, clinical metadata and binary survival labels.

Two export styles are supported through :class:`CohortConfig`: continuous
per-cell measurements (marker intensities, morphology, optional
tumor/stroma category) and a single categorical phenotype column that is
one-hot encoded. Coordinates are converted to micrometers on load.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import enum
import re

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    DoubleFusion,
    DuplicatePatient,
    EmptyCore,
    MissingColumn,
    NonFiniteValue,
)

DAYS_PER_MONTH = 365.25 / 12


class Label(enum.IntEnum):
    """Binary survival label; SHORT is the positive class."""

    LONG = 0
    SHORT = 1


class CensorPolicy(str, enum.Enum):
    EXCLUDE_CENSORED_SHORT = "exclude_censored_short"
    KEEP_ALL = "keep_all"


def months_to_days(months):
    return months * DAYS_PER_MONTH


@dataclass
class Core:
    """One imaged tissue sample: a bag of cells tied to a patient."""

    core_id: str
    patient_id: str
    coords_um: np.ndarray
    features: np.ndarray
    feature_names: tuple = ()
    tissue_tumor: np.ndarray | None = None
    cell_ids: np.ndarray | None = None

    def __post_init__(self):
        self.coords_um = np.asarray(self.coords_um, dtype=np.float64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        n = self.coords_um.shape[0]
        if n == 0:
            raise EmptyCore(f"core {self.core_id!r} has no cells")
        if self.features.shape[0] != n:
            raise DataError(f"core {self.core_id!r}: {n} coordinates but {self.features.shape[0]} feature rows")
        if not np.all(np.isfinite(self.coords_um)):
            raise NonFiniteValue(f"core {self.core_id!r} has non-finite coordinates")
        if self.cell_ids is None:
            self.cell_ids = np.arange(n)

    @property
    def n_cells(self):
        return self.coords_um.shape[0]

    def node_features(self, include_tissue=True):
        """Feature matrix used as graph node attributes (tissue bit appended when known)."""
        if include_tissue and self.tissue_tumor is not None:
            return np.column_stack([self.features, self.tissue_tumor.astype(np.float64)])
        return self.features


@dataclass
class ClinicalRecord:
    patient_id: str
    follow_up: float
    event: bool
    stage_binary: bool
    label: Label | None = None


@dataclass
class CohortConfig:
    """Column mapping and labelling rules for one cohort export."""

    label_threshold: float = 1730.0
    um_per_unit: float = 1.0
    censor_policy: CensorPolicy = CensorPolicy.EXCLUDE_CENSORED_SHORT
    high_stages: tuple = ("II", "III", "IV")
    feature_columns: tuple = ()
    onehot_column: str | None = None
    onehot_categories: tuple = ()
    tissue_column: str | None = None
    tumor_value: str = "Tumor"
    follow_up_unit: str = "days"
    columns: dict = field(default_factory=lambda: {
        "patient_id": "patient_id",
        "core_id": "core_id",
        "cell_id": "cell_id",
        "x": "x",
        "y": "y",
        "follow_up": "follow_up_days",
        "event": "event",
        "stage": "stage",
    })

    def __post_init__(self):
        self.censor_policy = CensorPolicy(self.censor_policy)
        self.high_stages = tuple(str(s).upper() for s in self.high_stages)
        self.feature_columns = tuple(self.feature_columns)
        self.onehot_categories = tuple(str(c) for c in self.onehot_categories)
        if not self.label_threshold > 0:
            raise ConfigError("label_threshold must be positive")
        if not self.um_per_unit > 0:
            raise ConfigError("um_per_unit must be positive")
        if not self.feature_columns and self.onehot_column is None:
            raise ConfigError("cohort config declares no feature columns")
        if self.follow_up_unit not in ("days", "months"):
            raise ConfigError(f"follow_up_unit must be 'days' or 'months', got {self.follow_up_unit!r}")
        unknown = set(self.high_stages) - set(_ROMAN)
        if unknown:
            raise ConfigError(f"high_stages must be roman numerals I-IV, got {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "label_threshold_months" in d:
            d["label_threshold"] = months_to_days(d.pop("label_threshold_months"))
        if "label_threshold_days" in d:
            d["label_threshold"] = d.pop("label_threshold_days")
        if "stage_split" in d:
            d["high_stages"] = d.pop("stage_split")
        cols = cls.__dataclass_fields__["columns"].default_factory()
        cols.update(d.pop("columns", {}))
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown cohort config keys: {sorted(extra)}")
        return cls(columns=cols, **d)

    def to_dict(self):
        return {
            "label_threshold_days": self.label_threshold,
            "um_per_unit": self.um_per_unit,
            "censor_policy": self.censor_policy.value,
            "stage_split": list(self.high_stages),
            "feature_columns": list(self.feature_columns),
            "onehot_column": self.onehot_column,
            "onehot_categories": list(self.onehot_categories),
            "tissue_column": self.tissue_column,
            "tumor_value": self.tumor_value,
            "follow_up_unit": self.follow_up_unit,
            "columns": dict(self.columns),
        }


def dataset1_config(feature_columns, **overrides):
    """mIF-style cohort: 1730-day threshold, stage I vs II-IV, tissue category column."""
    kw = dict(label_threshold=1730.0, high_stages=("II", "III", "IV"),
              feature_columns=tuple(feature_columns), tissue_column="tissue_category")
    kw.update(overrides)
    return CohortConfig(**kw)


def dataset2_config(phenotypes, phenotype_column="phenotype", **overrides):
    """IMC-style cohort: 36-month threshold, stage I-II vs III-IV, one-hot phenotype, 1 um/px."""
    kw = dict(label_threshold=months_to_days(36), high_stages=("III", "IV"),
              onehot_column=phenotype_column, onehot_categories=tuple(phenotypes), um_per_unit=1.0)
    kw.update(overrides)
    return CohortConfig(**kw)


def derive_binary_label(follow_up, event, threshold, policy=CensorPolicy.EXCLUDE_CENSORED_SHORT):
    """Short/Long label from follow-up; ``None`` for censored-short under exclusion.

    The boundary is inclusive: ``follow_up == threshold`` is Long.
    """
    if follow_up < 0:
        raise DataError(f"negative follow-up {follow_up}")
    if follow_up >= threshold:
        return Label.LONG
    if event:
        return Label.SHORT
    if CensorPolicy(policy) is CensorPolicy.EXCLUDE_CENSORED_SHORT:
        return None
    return Label.SHORT


_ROMAN = {"I": 1, "II": 2, "III": 3, "IV": 4}
_STAGE_RE = re.compile(r"^(?:STAGE\s*)?(IV|III|II|I|[1-4])")


def parse_stage(raw):
    """Major TNM stage (1-4) from strings like 'IIIA', 'Stage IB', '2'."""
    s = str(raw).strip().upper()
    m = _STAGE_RE.match(s)
    if not m:
        raise DataError(f"cannot parse cancer stage {raw!r}")
    tok = m.group(1)
    return int(tok) if tok.isdigit() else _ROMAN[tok]


def stage_is_high(raw, high_stages):
    return parse_stage(raw) in {_ROMAN[s] for s in high_stages}


_TRUE = {"1", "true", "yes", "dead", "deceased", "event", "t", "y"}
_FALSE = {"0", "false", "no", "alive", "living", "censored", "f", "n"}


def _parse_event(v):
    s = str(v).strip().lower()
    # cBioPortal-style codes such as "1:DECEASED"
    s = s.split(":", 1)[0] if ":" in s else s
    if s.endswith(".0"):
        s = s[:-2]
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise DataError(f"cannot parse event indicator {v!r}")


def _require(df, names, path):
    missing = [c for c in names if c not in df.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")


def _numeric(df, col, path):
    vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        row = int(bad[0])
        raise NonFiniteValue(f"{path}: non-finite value {df[col].iloc[row]!r} in column {col!r} at row {row}", row=row)
    return vals


def load_cell_table(path, config):
    """Read a per-cell CSV into one :class:`Core` per (patient, core) pair.

    Cores come back sorted by (patient_id, core_id); cells keep file order.
    """
    c = config.columns
    df = pd.read_csv(path, dtype={c["patient_id"]: str, c["core_id"]: str}, keep_default_na=False)
    required = [c["patient_id"], c["core_id"], c["x"], c["y"], *config.feature_columns]
    if config.onehot_column:
        required.append(config.onehot_column)
    if config.tissue_column:
        required.append(config.tissue_column)
    _require(df, required, path)
    if df.empty:
        raise EmptyCore(f"{path}: no cells")

    x = _numeric(df, c["x"], path) * config.um_per_unit
    y = _numeric(df, c["y"], path) * config.um_per_unit
    blocks, names = [], []
    for col in config.feature_columns:
        blocks.append(_numeric(df, col, path))
        names.append(col)
    if config.onehot_column:
        cats = config.onehot_categories or tuple(sorted(df[config.onehot_column].astype(str).unique()))
        values = df[config.onehot_column].astype(str).to_numpy()
        unknown = sorted(set(values) - set(cats))
        if unknown:
            raise DataError(f"{path}: phenotypes {unknown[:5]} not in declared categories")
        for cat in cats:
            blocks.append((values == cat).astype(np.float64))
            names.append(f"{config.onehot_column}={cat}")
    feats = np.column_stack(blocks)
    tumor = None
    if config.tissue_column:
        tumor = (df[config.tissue_column].astype(str).str.strip().str.lower()
                 == config.tumor_value.lower()).to_numpy()
    cell_ids = df[c["cell_id"]].to_numpy() if c.get("cell_id") in df.columns else np.arange(len(df))

    groups = df.groupby([df[c["patient_id"]].astype(str), df[c["core_id"]].astype(str)]).indices
    cores = []
    for (pid, cid), idx in sorted(groups.items()):
        cores.append(Core(
            core_id=cid,
            patient_id=pid,
            coords_um=np.column_stack([x[idx], y[idx]]),
            features=feats[idx],
            feature_names=tuple(names),
            tissue_tumor=None if tumor is None else tumor[idx],
            cell_ids=cell_ids[idx],
        ))
    return cores


def load_clinical(path, config):
    """Read the clinical CSV (one row per patient) into :class:`ClinicalRecord` objects."""
    c = config.columns
    df = pd.read_csv(path, dtype={c["patient_id"]: str}, keep_default_na=False)
    _require(df, [c["patient_id"], c["follow_up"], c["event"], c["stage"]], path)
    dup = df[c["patient_id"]][df[c["patient_id"]].duplicated()]
    if len(dup):
        raise DuplicatePatient(f"{path}: duplicate patient id {dup.iloc[0]!r}")
    follow = _numeric(df, c["follow_up"], path)
    if config.follow_up_unit == "months":
        follow = months_to_days(follow)
    records = []
    for i in range(len(df)):
        pid = str(df[c["patient_id"]].iloc[i])
        if follow[i] < 0:
            raise DataError(f"{path}: negative follow-up at row {i}")
        event = _parse_event(df[c["event"]].iloc[i])
        stage = stage_is_high(df[c["stage"]].iloc[i], config.high_stages)
        label = derive_binary_label(follow[i], event, config.label_threshold, config.censor_policy)
        records.append(ClinicalRecord(pid, float(follow[i]), event, stage, label))
    return records


def attach_stage_feature(core_graph, stage_binary):
    """Append a constant stage column (1.0 high / 0.0 low) to every node."""
    if getattr(core_graph, "stage_fused", False):
        raise DoubleFusion("stage feature already attached to this graph")
    col = np.full((core_graph.n_nodes, 1), 1.0 if stage_binary else 0.0)
    return replace(core_graph, node_features=np.hstack([core_graph.node_features, col]), stage_fused=True)


def write_cell_table(path, cores, config):
    """Write cores back to the CSV layout ``load_cell_table`` reads (unit scale 1)."""
    c = config.columns
    frames = []
    for core in cores:
        d = {
            c["patient_id"]: core.patient_id,
            c["core_id"]: core.core_id,
            c["cell_id"]: core.cell_ids,
            c["x"]: core.coords_um[:, 0] / config.um_per_unit,
            c["y"]: core.coords_um[:, 1] / config.um_per_unit,
        }
        if config.onehot_column:
            cats = np.asarray(config.onehot_categories)
            d[config.onehot_column] = cats[np.argmax(core.features, axis=1)]
        else:
            for j, col in enumerate(config.feature_columns):
                d[col] = core.features[:, j]
        if config.tissue_column and core.tissue_tumor is not None:
            d[config.tissue_column] = np.where(core.tissue_tumor, "Tumor", "Stroma")
        frames.append(pd.DataFrame(d))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def write_clinical(path, records, config, stage_names=("I", "III")):
    c = config.columns
    pd.DataFrame({
        c["patient_id"]: [r.patient_id for r in records],
        c["follow_up"]: [r.follow_up for r in records],
        c["event"]: [int(r.event) for r in records],
        c["stage"]: [stage_names[int(r.stage_binary)] for r in records],
    }).to_csv(path, index=False)


def labeled_patients(records):
    return [r for r in records if r.label is not None]

