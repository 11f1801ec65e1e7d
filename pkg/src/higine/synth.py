"""Synthetic cohorts with prognosis planted in spatial arrangement only.

Every core draws its cell-type counts from the same distribution, so
per-core means and standard deviations of the one-hot features carry no
label information. Long-survival cores arrange the types in contiguous
domains; short-survival cores have a fraction ``mixing_strength`` of
their cells' types shuffled, which interleaves the domains.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .cell_table import ClinicalRecord, CohortConfig, Core, Label, derive_binary_label
from .errors import InvalidConfig


@dataclass
class SynthConfig:
    seed: int = 0
    n_patients: int = 60
    cells_per_core: tuple = (240, 320)
    n_cell_types: int = 4
    mixing_strength: float = 1.0
    stage_signal: float = 0.0
    censor_rate: float = 0.2
    # share of short-survival patients that actually carry the mixed phenotype
    spatial_penetrance: float = 1.0
    cores_per_patient: int = 1
    density_per_um2: float = 0.006
    domains_per_type: int = 2
    short_fraction: float = 0.5
    label_threshold_days: float = 1730.0

    def __post_init__(self):
        self.cells_per_core = tuple(int(c) for c in self.cells_per_core)
        for name in ("mixing_strength", "stage_signal", "censor_rate", "spatial_penetrance", "short_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.cells_per_core
        if not 1 <= lo <= hi:
            raise InvalidConfig(f"cells_per_core must be a positive range, got {self.cells_per_core}")
        if min(self.n_patients, self.n_cell_types, self.cores_per_patient, self.domains_per_type) < 1:
            raise InvalidConfig("counts must be positive")
        if self.density_per_um2 <= 0 or self.label_threshold_days <= 0:
            raise InvalidConfig("density and threshold must be positive")

    def to_dict(self):
        return asdict(self)


def cohort_config(config):
    """Matching :class:`CohortConfig` for reading the generator's CSVs back."""
    return CohortConfig(
        label_threshold=config.label_threshold_days,
        onehot_column="cell_type",
        onehot_categories=tuple(f"T{t}" for t in range(config.n_cell_types)),
        high_stages=("III", "IV"),
    )


def _segregated_types(rng, coords, counts, n_domains):
    """Assign types in contiguous runs over cells ordered by domain then distance to its seed."""
    n = coords.shape[0]
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    seeds = rng.uniform(lo, hi, size=(n_domains, 2))
    d2 = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    domain = d2.argmin(axis=1)
    rank = np.empty(n_domains, dtype=np.intp)
    rank[rng.permutation(n_domains)] = np.arange(n_domains)
    order = np.lexsort((d2[np.arange(n), domain], rank[domain]))
    types = np.empty(n, dtype=np.intp)
    types[order] = np.repeat(np.arange(len(counts)), counts)
    return types


def _mix(rng, types, fraction):
    n = types.size
    m = int(round(fraction * n))
    if m < 2:
        return types
    chosen = rng.choice(n, size=m, replace=False)
    out = types.copy()
    out[chosen] = types[rng.permutation(chosen)]
    return out


def _core(rng, config, patient_id, core_idx, mixed):
    lo, hi = config.cells_per_core
    n = int(rng.integers(lo, hi + 1))
    side = np.sqrt(n / config.density_per_um2)
    coords = rng.uniform(0.0, side, size=(n, 2))
    counts = rng.multinomial(n, np.full(config.n_cell_types, 1.0 / config.n_cell_types))
    types = _segregated_types(rng, coords, counts, config.domains_per_type * config.n_cell_types)
    if mixed:
        types = _mix(rng, types, config.mixing_strength)
    feats = np.eye(config.n_cell_types)[types]
    return Core(
        core_id=f"{patient_id}_c{core_idx}",
        patient_id=patient_id,
        coords_um=coords,
        features=feats,
        feature_names=tuple(f"cell_type=T{t}" for t in range(config.n_cell_types)),
    )


def _follow_up(rng, config, short):
    thr = config.label_threshold_days
    if short:
        # exponential with scale thr/2, conditioned below the threshold (inverse CDF)
        u = rng.uniform()
        return float(-thr / 2 * np.log(1 - u * (1 - np.exp(-2.0))))
    return float(thr + rng.exponential(thr))


def generate_cohort(config):
    """Return ``(cores, clinical_records)`` for ``config``; deterministic in ``config.seed``."""
    root = np.random.SeedSequence(config.seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    n_short = int(round(config.short_fraction * config.n_patients))
    is_short = np.zeros(config.n_patients, dtype=bool)
    is_short[:n_short] = True
    rng.shuffle(is_short)
    width = len(str(config.n_patients - 1))
    cores, clinical = [], []
    for i, (short, seq) in enumerate(zip(is_short, root.spawn(config.n_patients))):
        prng = np.random.default_rng(seq)
        pid = f"P{i:0{width}d}"
        mixed = bool(short) and prng.uniform() < config.spatial_penetrance
        for c in range(config.cores_per_patient):
            cores.append(_core(prng, config, pid, c, mixed))
        time = _follow_up(prng, config, short)
        event = True
        # only long survivors are censored, after the threshold, so labels are unaffected
        if not short and prng.uniform() < config.censor_rate:
            time = float(prng.uniform(config.label_threshold_days, time))
            event = False
        if prng.uniform() < config.stage_signal:
            stage = bool(short)
        else:
            stage = bool(prng.uniform() < 0.5)
        label = derive_binary_label(time, event, config.label_threshold_days)
        assert label == (Label.SHORT if short else Label.LONG)
        clinical.append(ClinicalRecord(pid, time, event, stage, label))
    return cores, clinical
