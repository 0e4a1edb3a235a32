"""Synthetic clinical-style dataset generator.

Stands in for credentialed hospital data: writes patients, admissions,
and per-admission code tables plus a matching descriptor. All randomness
comes from one numpy PCG64 generator (a 64-bit permuted congruential
generator with fixed constants), so a given seed always reproduces the
same bytes.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .descriptor import (
    DatasetDescriptor,
    JoinSpec,
    TableSpec,
    serialize_descriptor,
)
from .errors import IoError, ValidationError

DESCRIPTOR_NAME = "dataset.yaml"
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

_BASE = datetime(2019, 1, 1)
_CODE_PREFIX = {"conditions": "D", "procedures": "P", "drugs": "R"}
_CODE_TABLE = {
    "conditions": "diagnoses",
    "procedures": "procedures",
    "drugs": "prescriptions",
}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    admissions_per_patient: tuple[int, int] = (1, 3)
    codes_per_admission: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {
            "conditions": (1, 4),
            "procedures": (1, 3),
            "drugs": (1, 4),
        }
    )
    vocab_sizes: dict[str, int] = field(
        default_factory=lambda: {"conditions": 500, "procedures": 300, "drugs": 400}
    )
    death_rate: float = 0.05
    los_mu: float = math.log(3.0)
    los_sigma: float = 1.0
    readmit_gap_days: tuple[float, float] = (1.0, 90.0)
    seed: int = 0
    # when set, deaths are only drawn for a patient's final admission so no
    # admissions are truncated and total event counts stay exact
    death_on_last_only: bool = False

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValidationError("n_patients must be >= 1")
        lo, hi = self.admissions_per_patient
        if not (1 <= lo <= hi):
            raise ValidationError("admissions_per_patient range must be 1 <= lo <= hi")
        for name, (clo, chi) in self.codes_per_admission.items():
            if not (0 <= clo <= chi):
                raise ValidationError(f"codes_per_admission[{name!r}] range invalid")
        if not (0.0 <= self.death_rate <= 1.0):
            raise ValidationError("death_rate must lie in [0, 1]")


def total_events_upper_bound(cfg: SynthConfig) -> int:
    _, adm_hi = cfg.admissions_per_patient
    per_adm = sum(hi for _, hi in cfg.codes_per_admission.values())
    return cfg.n_patients * (1 + adm_hi * (1 + per_adm))


def build_descriptor(dataset_name: str) -> DatasetDescriptor:
    tables = {
        "patients": TableSpec(
            name="patients",
            file="patients.csv",
            patient_id_column="subject_id",
            attribute_columns=("gender", "age"),
        ),
        "admissions": TableSpec(
            name="admissions",
            file="admissions.csv",
            patient_id_column="subject_id",
            timestamp_column="admittime",
            timestamp_format=TIMESTAMP_FORMAT,
            attribute_columns=("hadm_id", "dischtime", "death_flag"),
        ),
    }
    for table in _CODE_TABLE.values():
        tables[table] = TableSpec(
            name=table,
            file=f"{table}.csv",
            patient_id_column="subject_id",
            timestamp_column="admittime",
            timestamp_format=TIMESTAMP_FORMAT,
            attribute_columns=("hadm_id", "code"),
            join=JoinSpec(table="admissions", on="hadm_id", columns=("admittime",)),
        )
    return DatasetDescriptor(dataset_name=dataset_name, tables=tables)


def _fmt(ts: datetime) -> str:
    return ts.replace(microsecond=0).isoformat(sep=" ")


def generate(cfg: SynthConfig, out_dir: str) -> str:
    """Write the dataset tables and descriptor; returns the descriptor path."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = cfg.n_patients
    adm_lo, adm_hi = cfg.admissions_per_patient
    adm_counts = rng.integers(adm_lo, adm_hi + 1, size=n)
    total_adm = int(adm_counts.sum())

    first_offset_days = rng.uniform(0.0, 365.0, size=n)
    los_days = rng.lognormal(cfg.los_mu, cfg.los_sigma, size=total_adm)
    gap_lo, gap_hi = cfg.readmit_gap_days
    gaps = rng.uniform(gap_lo, gap_hi, size=total_adm)
    deaths = rng.random(size=total_adm) < cfg.death_rate

    code_counts: dict[str, np.ndarray] = {}
    code_ids: dict[str, np.ndarray] = {}
    for kind, (clo, chi) in cfg.codes_per_admission.items():
        counts = rng.integers(clo, chi + 1, size=total_adm)
        code_counts[kind] = counts
        code_ids[kind] = rng.integers(0, cfg.vocab_sizes[kind], size=int(counts.sum()))

    genders = rng.integers(0, 2, size=n)
    ages = rng.integers(18, 95, size=n)

    files = {
        "patients": open(
            os.path.join(out_dir, "patients.csv"), "w", encoding="utf-8", newline=""
        ),
        "admissions": open(
            os.path.join(out_dir, "admissions.csv"), "w", encoding="utf-8", newline=""
        ),
    }
    for table in _CODE_TABLE.values():
        files[table] = open(
            os.path.join(out_dir, f"{table}.csv"), "w", encoding="utf-8", newline=""
        )
    writers = {name: csv.writer(f) for name, f in files.items()}
    writers["patients"].writerow(["subject_id", "gender", "age"])
    writers["admissions"].writerow(
        ["subject_id", "hadm_id", "admittime", "dischtime", "death_flag"]
    )
    for table in _CODE_TABLE.values():
        writers[table].writerow(["subject_id", "hadm_id", "code"])

    code_rows: dict[str, list] = {t: [] for t in _CODE_TABLE.values()}
    code_pos = {k: 0 for k in _CODE_TABLE}
    adm_pos = 0
    hadm_counter = 0
    day = timedelta(days=1)

    try:
        for p in range(n):
            pid = f"P{p:08d}"
            writers["patients"].writerow(
                [pid, "F" if genders[p] else "M", int(ages[p])]
            )
            planned = int(adm_counts[p])
            admit = _BASE + first_offset_days[p] * day
            adm_rows = []
            for j in range(planned):
                los = float(los_days[adm_pos + j])
                discharge = admit + los * day
                if cfg.death_on_last_only:
                    died = bool(deaths[adm_pos + j]) and j == planned - 1
                else:
                    died = bool(deaths[adm_pos + j])
                hadm = f"H{hadm_counter:09d}"
                hadm_counter += 1
                adm_rows.append(
                    (pid, hadm, _fmt(admit), _fmt(discharge), "1" if died else "0")
                )
                for kind, table in _CODE_TABLE.items():
                    cnt = int(code_counts[kind][adm_pos + j])
                    start = code_pos[kind]
                    prefix = _CODE_PREFIX[kind]
                    for cid in code_ids[kind][start : start + cnt]:
                        code_rows[table].append((pid, hadm, f"{prefix}{cid:05d}"))
                    code_pos[kind] = start + cnt
                if died and not cfg.death_on_last_only:
                    break
                admit = discharge + float(gaps[adm_pos + j]) * day
            adm_pos += planned
            writers["admissions"].writerows(adm_rows)
            for table, rows in code_rows.items():
                if rows:
                    writers[table].writerows(rows)
                    rows.clear()
    finally:
        for f in files.values():
            f.close()

    descriptor = build_descriptor(f"synth-{cfg.seed}")
    descriptor_path = os.path.join(out_dir, DESCRIPTOR_NAME)
    with open(descriptor_path, "w", encoding="utf-8") as f:
        f.write(serialize_descriptor(descriptor))
    return descriptor_path


# named generation profiles used by the benchmark suite
PROFILES: dict[str, SynthConfig] = {
    # ~1000 patients with varied structure; small enough for oracle replay
    "fixture1k": SynthConfig(n_patients=1000, death_rate=0.08, seed=1001),
    # exactly 1,000,000 events: 40,000 patients x (1 patient row + 2
    # admissions + 2 x (4+4+3) code rows); deaths never truncate
    "budget1m": SynthConfig(
        n_patients=40_000,
        admissions_per_patient=(2, 2),
        codes_per_admission={
            "conditions": (4, 4),
            "procedures": (4, 4),
            "drugs": (3, 3),
        },
        death_rate=0.08,
        seed=2001,
        death_on_last_only=True,
    ),
    # 200k patients for the scaling measurements
    "bench200k": SynthConfig(
        n_patients=200_000,
        admissions_per_patient=(1, 3),
        codes_per_admission={
            "conditions": (1, 4),
            "procedures": (1, 3),
            "drugs": (1, 4),
        },
        death_rate=0.05,
        seed=3001,
    ),
}
