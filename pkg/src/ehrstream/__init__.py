"""Memory-bounded, deterministic event-stream processing for longitudinal
clinical-style records: ingest/join, a patient-sorted partitioned cache,
lazy patient access, parallel task transformation, shard-cached encoded
samples, code-ontology translation, and post-hoc uncertainty
quantification.
"""

from .descriptor import (
    DatasetDescriptor,
    JoinSpec,
    TableSpec,
    parse_descriptor,
    serialize_descriptor,
)
from .engine import SampleSetManifest, iter_samples, set_task
from .errors import EhrError
from .events import Event, EventFilter, PatientRecord, event_sort_key
from .ingest import (
    CacheManifest,
    EventPartition,
    IngestConfig,
    external_sort,
    ingest,
    write_partitions,
)
from .processors import (
    LabelSpace,
    VocabCounts,
    Vocabulary,
    encode_label,
    encode_multihot,
    encode_nested,
    encode_sequence,
    fit_vocab,
)
from .store import PatientBatch, Store, get_events, iter_patient_batches, open_store
from .tasks import (
    BUILTIN_TASKS,
    RawSample,
    TaskDefinition,
    drugrec_apply,
    get_builtin_task,
    los_apply,
    los_bin,
    mortality_apply,
)

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_TASKS",
    "CacheManifest",
    "DatasetDescriptor",
    "EhrError",
    "Event",
    "EventFilter",
    "EventPartition",
    "IngestConfig",
    "JoinSpec",
    "LabelSpace",
    "PatientBatch",
    "PatientRecord",
    "RawSample",
    "SampleSetManifest",
    "Store",
    "TableSpec",
    "TaskDefinition",
    "VocabCounts",
    "Vocabulary",
    "drugrec_apply",
    "encode_label",
    "encode_multihot",
    "encode_nested",
    "encode_sequence",
    "event_sort_key",
    "external_sort",
    "fit_vocab",
    "get_builtin_task",
    "get_events",
    "ingest",
    "iter_patient_batches",
    "iter_samples",
    "los_apply",
    "los_bin",
    "mortality_apply",
    "open_store",
    "parse_descriptor",
    "serialize_descriptor",
    "set_task",
    "write_partitions",
]
