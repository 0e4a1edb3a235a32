"""Task definitions: declarative schemas plus per-patient sample builders.

Built-in tasks expect the admission-centric table conventions used by the
bundled synthetic generator and fixtures:

* an ``admissions`` event per hospitalization, timestamped with the admit
  instant and carrying ``hadm_id``, ``dischtime`` and ``death_flag``
  attributes;
* ``diagnoses`` / ``procedures`` / ``prescriptions`` events carrying
  ``hadm_id`` and ``code`` attributes.

Label conventions (documented, not universal): the mortality label is the
death flag of the *next* admission, and length-of-stay uses 1-day classes
through day 8, then 8-14, then 14+.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional

from .errors import ValidationError
from .events import PatientRecord
from .processors import LABEL_KINDS, PROCESSOR_KINDS

ADMISSIONS_TABLE = "admissions"
HADM_ID_ATTR = "hadm_id"
DISCHARGE_ATTR = "dischtime"
DEATH_FLAG_ATTR = "death_flag"
CODE_ATTR = "code"
CODE_TABLES = {
    "conditions": "diagnoses",
    "procedures": "procedures",
    "drugs": "prescriptions",
}

N_LOS_CLASSES = 10


@dataclass(frozen=True)
class RawSample:
    patient_id: str
    values: dict[str, object]


@dataclass(frozen=True)
class TaskDefinition:
    task_name: str
    input_schema: dict[str, str]
    output_schema: dict[str, str]
    apply: Callable[[PatientRecord], list[RawSample]]
    # a multiclass/multilabel output may pin its label space up front (e.g.
    # a fixed number of ordinal classes); otherwise the space is fitted
    # from the observed labels
    fixed_label_spaces: dict[str, tuple[str, ...]] = field(default_factory=dict)
    # set for registered built-ins; lets worker processes rebuild the task
    # by name (spawn) instead of inheriting it (fork)
    registry_name: Optional[str] = None

    def __post_init__(self):
        if not self.input_schema or not self.output_schema:
            raise ValidationError("input and output schemas must be non-empty")
        overlap = set(self.input_schema) & set(self.output_schema)
        if overlap:
            raise ValidationError(
                f"schema field(s) {sorted(overlap)} appear in both input and "
                "output schemas"
            )
        for f_name, kind in self.input_schema.items():
            if kind not in PROCESSOR_KINDS:
                raise ValidationError(
                    f"input field {f_name!r}: unknown processor kind {kind!r}"
                )
        for f_name, kind in self.output_schema.items():
            if kind not in LABEL_KINDS:
                raise ValidationError(
                    f"output field {f_name!r}: unknown label kind {kind!r}"
                )

    @property
    def all_fields(self) -> list[str]:
        return list(self.input_schema) + list(self.output_schema)


# --------------------------------------------------------------------------
# skip accounting: apply functions have no side channel, so skipped
# admissions are tallied on a module counter the engine drains per patient.

_skip_count = 0


def note_skip(n: int = 1):
    global _skip_count
    _skip_count += n


def take_skip_count() -> int:
    global _skip_count
    n = _skip_count
    _skip_count = 0
    return n


# --------------------------------------------------------------------------
# admission view shared by the built-in tasks


@dataclass
class Admission:
    hadm_id: str
    admit: Optional[datetime]
    discharge: Optional[datetime]
    death: int
    conditions: list[str] = field(default_factory=list)
    procedures: list[str] = field(default_factory=list)
    drugs: list[str] = field(default_factory=list)


def _parse_instant(raw: Optional[str]) -> Optional[datetime]:
    if not raw:
        return None
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        return None


_TABLE_TO_LIST = {
    CODE_TABLES["conditions"]: "conditions",
    CODE_TABLES["procedures"]: "procedures",
    CODE_TABLES["drugs"]: "drugs",
}


def admissions_of(p: PatientRecord) -> list[Admission]:
    """Admissions in canonical order with their per-visit code lists."""
    order: list[Admission] = []
    by_id: dict[str, Admission] = {}
    for e in p.events:
        if e.event_type == ADMISSIONS_TABLE:
            attrs = e.attributes
            hadm = attrs.get(HADM_ID_ATTR, "")
            flag = attrs.get(DEATH_FLAG_ATTR, "")
            adm = Admission(
                hadm_id=hadm,
                admit=e.timestamp,
                discharge=_parse_instant(attrs.get(DISCHARGE_ATTR)),
                death=1 if flag == "1" or flag.lower() == "true" else 0,
            )
            order.append(adm)
            if hadm and hadm not in by_id:
                by_id[hadm] = adm
    for e in p.events:
        list_name = _TABLE_TO_LIST.get(e.event_type)
        if list_name is None:
            continue
        hadm = e.attributes.get(HADM_ID_ATTR)
        code = e.attributes.get(CODE_ATTR)
        if not hadm or not code:
            continue
        adm = by_id.get(hadm)
        if adm is not None:
            getattr(adm, list_name).append(code)
    return order


def los_bin(duration_days: float) -> int:
    """Discretize a stay length in days into one of 10 ordinal classes.

    Class 0 is under one day; classes 1..7 are 1-day bins; class 8 covers
    8-14 days; class 9 is 14 days and beyond.
    """
    if duration_days < 0:
        raise ValidationError("duration_days must be non-negative")
    if duration_days < 1:
        return 0
    if duration_days < 8:
        return int(duration_days)
    if duration_days < 14:
        return 8
    return 9


# --------------------------------------------------------------------------
# built-in tasks


def mortality_apply(p: PatientRecord) -> list[RawSample]:
    """One sample per admission that has a successor admission.

    Inputs are the admission's own code lists; the binary label is the
    next admission's death flag. Admissions with any empty code list are
    skipped and counted.
    """
    adms = admissions_of(p)
    samples = []
    for i in range(len(adms) - 1):
        adm = adms[i]
        if not (adm.conditions and adm.procedures and adm.drugs):
            note_skip()
            continue
        samples.append(
            RawSample(
                patient_id=p.patient_id,
                values={
                    "conditions": list(adm.conditions),
                    "procedures": list(adm.procedures),
                    "drugs": list(adm.drugs),
                    "label": adms[i + 1].death,
                },
            )
        )
    return samples


def drugrec_apply(p: PatientRecord) -> list[RawSample]:
    """From the second admission on: recommend this visit's drug set.

    ``drugs_hist`` nests the drug lists of all prior admissions, in order.
    Admissions with empty conditions, procedures, or drugs are skipped.
    """
    adms = admissions_of(p)
    samples = []
    for i in range(1, len(adms)):
        adm = adms[i]
        if not (adm.conditions and adm.procedures and adm.drugs):
            note_skip()
            continue
        samples.append(
            RawSample(
                patient_id=p.patient_id,
                values={
                    "conditions": list(adm.conditions),
                    "procedures": list(adm.procedures),
                    "drugs_hist": [list(a.drugs) for a in adms[:i]],
                    "label": sorted(set(adm.drugs)),
                },
            )
        )
    return samples


def los_apply(p: PatientRecord) -> list[RawSample]:
    """One sample per admission, labelled with its binned stay length."""
    samples = []
    for adm in admissions_of(p):
        if not (adm.conditions and adm.procedures and adm.drugs):
            note_skip()
            continue
        if adm.admit is None or adm.discharge is None or adm.discharge < adm.admit:
            note_skip()
            continue
        days = (adm.discharge - adm.admit).total_seconds() / 86400.0
        samples.append(
            RawSample(
                patient_id=p.patient_id,
                values={
                    "conditions": list(adm.conditions),
                    "procedures": list(adm.procedures),
                    "drugs": list(adm.drugs),
                    "label": str(los_bin(days)),
                },
            )
        )
    return samples


def mortality_task() -> TaskDefinition:
    return TaskDefinition(
        task_name="mortality",
        input_schema={
            "conditions": "sequence",
            "procedures": "sequence",
            "drugs": "sequence",
        },
        output_schema={"label": "binary"},
        apply=mortality_apply,
        registry_name="mortality",
    )


def drug_rec_task() -> TaskDefinition:
    return TaskDefinition(
        task_name="drug_rec",
        input_schema={
            "conditions": "sequence",
            "procedures": "sequence",
            "drugs_hist": "nested_sequence",
        },
        output_schema={"label": "multilabel"},
        apply=drugrec_apply,
        registry_name="drug_rec",
    )


def los_task() -> TaskDefinition:
    return TaskDefinition(
        task_name="los",
        input_schema={
            "conditions": "sequence",
            "procedures": "sequence",
            "drugs": "sequence",
        },
        output_schema={"label": "multiclass"},
        apply=los_apply,
        # all 10 ordinal classes exist even when a dataset never hits one
        fixed_label_spaces={"label": tuple(str(i) for i in range(N_LOS_CLASSES))},
        registry_name="los",
    )


BUILTIN_TASKS: dict[str, Callable[[], TaskDefinition]] = {
    "mortality": mortality_task,
    "drug_rec": drug_rec_task,
    "los": los_task,
}


def get_builtin_task(name: str) -> TaskDefinition:
    try:
        factory = BUILTIN_TASKS[name]
    except KeyError:
        raise ValidationError(
            f"unknown task {name!r}; built-ins: {sorted(BUILTIN_TASKS)}"
        ) from None
    return factory()
