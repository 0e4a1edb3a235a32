"""Stage 1 of the pipeline: table-joining into the partitioned event cache.

Streams every raw table, applies declared joins, normalizes rows into
events, sorts them globally under a fixed memory budget (spilled sorted
runs + k-way merge), and writes patient-aligned EVP partitions plus a
JSON manifest. Re-running against an existing cache built from the same
descriptor is a no-op.

Determinism contract: partition files and the manifest are byte-identical
for any worker count. This holds because every event's sort key is unique
(seq is unique per table), so the merge output does not depend on how
events were split into runs.
"""

from __future__ import annotations

import heapq
import json
import os
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from operator import itemgetter
from typing import Iterable, Iterator, Optional

from . import evp
from .csvio import open_csv_reader
from .frames import iter_frames, write_frame
from .parallel import run_jobs
from .descriptor import (
    DatasetDescriptor,
    TableSpec,
    descriptor_digest,
    serialize_descriptor,
)
from .errors import (
    BudgetError,
    IoError,
    JoinKeyError,
    ManifestError,
    TimestampParseError,
    ValidationError,
)
from .events import Event, timestamp_to_micros

MIN_BUDGET_BYTES = 64 * 1024 * 1024
DEFAULT_TARGET_PARTITION_EVENTS = 1_048_576
MANIFEST_NAME = "manifest.json"
STATS_NAME = "ingest_stats.json"
PARTITION_DIR = "partitions"

# accounted cost of one buffered event beyond its encoded bytes: key tuple,
# list slot, bytes-object header
PER_EVENT_OVERHEAD = 160


@dataclass(frozen=True)
class IngestConfig:
    out_dir: str
    mem_budget_bytes: int = 4 * MIN_BUDGET_BYTES
    workers: int = 1
    target_partition_events: int = DEFAULT_TARGET_PARTITION_EVENTS
    # hash-join the parent table only while its estimated size stays under
    # this; None derives the limit from the per-worker budget slice
    join_hash_limit_bytes: Optional[int] = None

    def __post_init__(self):
        if self.mem_budget_bytes < MIN_BUDGET_BYTES:
            raise ValidationError(
                f"mem_budget_bytes must be >= {MIN_BUDGET_BYTES} (64 MiB)"
            )
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.target_partition_events < 1:
            raise ValidationError("target_partition_events must be >= 1")


@dataclass(frozen=True)
class EventPartition:
    path: str
    min_patient_id: str
    max_patient_id: str
    event_count: int
    patient_count: int


@dataclass(frozen=True)
class CacheManifest:
    dataset_name: str
    descriptor_digest: str
    partitions: tuple[EventPartition, ...]
    total_events: int
    total_patients: int
    created_at: str


class _Meter:
    """Accounted buffer bytes with a high-water mark."""

    __slots__ = ("acc", "high")

    def __init__(self):
        self.acc = 0
        self.high = 0

    def add(self, n: int):
        self.acc += n
        if self.acc > self.high:
            self.high = self.acc

    def reset(self, floor: int = 0):
        self.acc = floor


# --------------------------------------------------------------------------
# timestamp parsing

_FAST_FMT = "%Y-%m-%d %H:%M:%S"


def make_timestamp_parser(fmt: str):
    """strptime with a fast path for the common ISO-like layout."""
    if fmt == _FAST_FMT:

        def parse(s: str) -> datetime:
            if (
                len(s) == 19
                and s[4] == "-"
                and s[7] == "-"
                and s[10] == " "
                and s[13] == ":"
                and s[16] == ":"
            ):
                try:
                    return datetime.fromisoformat(s)
                except ValueError:
                    pass
            return datetime.strptime(s, _FAST_FMT)

        return parse
    return lambda s: datetime.strptime(s, fmt)


# --------------------------------------------------------------------------
# run generation (per table, worker-parallel)


@dataclass(frozen=True)
class _TableJob:
    spec: TableSpec
    csv_path: str
    parent_spec: Optional[TableSpec]
    parent_csv_path: Optional[str]
    budget: int
    hash_limit: int
    tmp_dir: str


@dataclass
class _JobResult:
    run_paths: list[str]
    rows_read: int
    events: int
    high_water: int
    spill_runs: int
    used_sort_merge_join: bool


def _column_index(header: list[str], column: str, table: str, path: str) -> int:
    try:
        return header.index(column)
    except ValueError:
        raise ValidationError(
            f"table {table!r}: column {column!r} not found in {path}"
        ) from None


def _load_join_map(job: _TableJob):
    """Hash side of the join: key column -> pulled column values.

    Returns ``(map, estimated_bytes)`` or ``(None, 0)`` when the parent
    exceeds the hash limit and the sort-merge path must be used instead.
    First occurrence of a duplicate key wins.
    """
    spec = job.spec
    join = spec.join
    reader, header = open_csv_reader(job.parent_csv_path)
    with reader:
        on_idx = header.index(join.on) if join.on in header else None
        if on_idx is None:
            raise JoinKeyError(
                f"table {spec.name!r}: join.on column {join.on!r} not found in "
                f"parent table {join.table!r} ({job.parent_csv_path})"
            )
        col_idxs = [
            _column_index(header, c, join.table, job.parent_csv_path)
            for c in join.columns
        ]
        ncols = len(header)
        out: dict[str, tuple[str, ...]] = {}
        est = 0
        for row in reader.rows():
            if len(row) < ncols:
                row = row + [""] * (ncols - len(row))
            key = row[on_idx]
            if key in out:
                continue
            vals = tuple(row[i] for i in col_idxs)
            out[key] = vals
            est += len(key) + sum(len(v) for v in vals) + 120
            if est > job.hash_limit:
                return None, 0
    return out, est


def _row_event_encoder(job: _TableJob, header: list[str]):
    """Builds the per-row closure turning a CSV row into (key, record bytes)."""
    spec = job.spec
    path = job.csv_path
    etype_b = spec.name.encode("utf-8")
    pid_idx = _column_index(header, spec.patient_id_column, spec.name, path)
    own_attr = []
    join_cols_b = []
    header_set = set(header)
    for col in spec.attribute_columns:
        own_attr.append((col.encode("utf-8"), _column_index(header, col, spec.name, path)))
    if spec.join is not None:
        join_cols_b = [c.encode("utf-8") for c in spec.join.columns]

    ts_parser = None
    ts_own_idx = None
    ts_join_pos = None
    if spec.timestamp_column is not None and spec.timestamp_format is not None:
        ts_parser = make_timestamp_parser(spec.timestamp_format)
        if spec.timestamp_column in header_set:
            ts_own_idx = header.index(spec.timestamp_column)
        elif spec.join is not None and spec.timestamp_column in spec.join.columns:
            ts_join_pos = spec.join.columns.index(spec.timestamp_column)
        else:
            raise ValidationError(
                f"table {spec.name!r}: timestamp_column "
                f"{spec.timestamp_column!r} is neither a CSV column nor a "
                "joined column"
            )
    ncols = len(header)
    encode_record = evp.encode_record
    pid_col = spec.patient_id_column

    def encode(row: list[str], seq: int, joined: Optional[tuple[str, ...]]):
        if len(row) < ncols:
            row = row + [""] * (ncols - len(row))
        pid = row[pid_idx]
        if not pid:
            raise ValidationError(
                f"{path}: row {seq + 2} has an empty {pid_col!r} cell"
            )
        attrs = []
        for col_b, idx in own_attr:
            v = row[idx]
            if v:
                attrs.append((col_b, v.encode("utf-8")))
        if joined is not None:
            for col_b, v in zip(join_cols_b, joined):
                if v:
                    attrs.append((col_b, v.encode("utf-8")))
        ts_us = None
        if ts_parser is not None:
            if ts_own_idx is not None:
                raw_ts = row[ts_own_idx]
            else:
                raw_ts = joined[ts_join_pos] if joined is not None else ""
            if raw_ts:
                try:
                    ts_us = timestamp_to_micros(ts_parser(raw_ts))
                except ValueError:
                    raise TimestampParseError(
                        f"{path}: row {seq + 2}: cannot parse {raw_ts!r} with "
                        f"format {spec.timestamp_format!r}"
                    ) from None
        pid_b = pid.encode("utf-8")
        rec = encode_record(pid_b, ts_us, etype_b, seq, attrs)
        if ts_us is None:
            key = (pid_b, 0, 0, etype_b, seq)
        else:
            key = (pid_b, 1, ts_us, etype_b, seq)
        return key, rec

    return encode


class _EventRunSpiller:
    """Buffers (key, record) pairs, spilling sorted runs under the budget."""

    def __init__(self, budget: int, tmp_dir: str, prefix: str, meter: _Meter, floor: int = 0):
        self.budget = budget
        self.tmp_dir = tmp_dir
        self.prefix = prefix
        self.meter = meter
        self.floor = floor
        self.buffer: list[tuple[tuple, bytes]] = []
        self.run_paths: list[str] = []

    def add(self, key: tuple, rec: bytes):
        cost = len(rec) + PER_EVENT_OVERHEAD
        if self.floor + cost > self.budget:
            raise BudgetError(
                f"one event of {len(rec)} bytes exceeds the memory budget slice "
                f"of {self.budget} bytes"
            )
        if self.meter.acc + cost > self.budget:
            self.spill()
        self.buffer.append((key, rec))
        self.meter.add(cost)

    def spill(self):
        if not self.buffer:
            return
        self.buffer.sort(key=itemgetter(0))
        path = os.path.join(
            self.tmp_dir, f"{self.prefix}-{len(self.run_paths):04d}.evr"
        )
        try:
            with open(path, "wb", buffering=1 << 20) as f:
                for _, rec in self.buffer:
                    f.write(rec)
        except OSError as exc:
            raise IoError(f"cannot write spill run {path}: {exc}") from exc
        self.run_paths.append(path)
        self.buffer.clear()
        self.meter.reset(self.floor)

    def finish(self) -> list[str]:
        self.spill()
        return self.run_paths


def _spill_pickle_run(buffer: list, tmp_dir: str, prefix: str, idx: int) -> str:
    buffer.sort(key=itemgetter(0))
    path = os.path.join(tmp_dir, f"{prefix}-{idx:04d}.pkr")
    try:
        with open(path, "wb", buffering=1 << 20) as f:
            for item in buffer:
                write_frame(f, item)
    except OSError as exc:
        raise IoError(f"cannot write spill run {path}: {exc}") from exc
    return path


def _iter_pickle_run(path: str) -> Iterator:
    with open(path, "rb", buffering=1 << 20) as f:
        yield from iter_frames(f)


def _generic_external_sort(
    items: Iterator[tuple], budget: int, tmp_dir: str, prefix: str, meter: _Meter
) -> Iterator[tuple]:
    """Sort arbitrary (key, payload) pairs; payload must be picklable."""
    buffer = []
    runs = []
    acc = 0
    for item in items:
        cost = len(item[0]) + 200 if isinstance(item[0], str) else 240
        if acc + cost > budget and buffer:
            runs.append(_spill_pickle_run(buffer, tmp_dir, prefix, len(runs)))
            buffer = []
            meter.reset()
            acc = 0
        buffer.append(item)
        acc += cost
        meter.add(cost)
    if buffer:
        runs.append(_spill_pickle_run(buffer, tmp_dir, prefix, len(runs)))
        meter.reset()
    return heapq.merge(*map(_iter_pickle_run, runs), key=itemgetter(0))


def _sort_merge_joined_rows(job: _TableJob, meter: _Meter) -> Iterator[tuple[int, list, Optional[tuple]]]:
    """Join via external sort of both sides when the parent map won't fit.

    Yields ``(seq, row, joined_values)`` in join-key order; the caller
    re-sorts the resulting events by the canonical key anyway.
    """
    spec = job.spec
    join = spec.join
    half = max(job.budget // 4, 1 << 20)

    def child_rows():
        reader, header = open_csv_reader(job.csv_path)
        with reader:
            on_idx = header.index(join.on) if join.on in header else None
            if on_idx is None:
                raise JoinKeyError(
                    f"table {spec.name!r}: join.on column {join.on!r} not found "
                    f"in {job.csv_path}"
                )
            for seq, row in enumerate(reader.rows()):
                key = row[on_idx] if on_idx < len(row) else ""
                yield key, (seq, row)

    def parent_rows():
        reader, header = open_csv_reader(job.parent_csv_path)
        with reader:
            on_idx = header.index(join.on) if join.on in header else None
            if on_idx is None:
                raise JoinKeyError(
                    f"table {spec.name!r}: join.on column {join.on!r} not found "
                    f"in parent table {join.table!r} ({job.parent_csv_path})"
                )
            col_idxs = [
                _column_index(header, c, join.table, job.parent_csv_path)
                for c in join.columns
            ]
            ncols = len(header)
            for row in reader.rows():
                if len(row) < ncols:
                    row = row + [""] * (ncols - len(row))
                yield row[on_idx], tuple(row[i] for i in col_idxs)

    sorted_children = _generic_external_sort(
        child_rows(), half, job.tmp_dir, f"{spec.name}-child", meter
    )
    sorted_parents = _generic_external_sort(
        parent_rows(), half, job.tmp_dir, f"{spec.name}-parent", meter
    )

    sentinel = object()
    pit = iter(sorted_parents)
    pk, pv = None, None
    p = next(pit, sentinel)
    if p is not sentinel:
        pk, pv = p
    for ck, (seq, row) in sorted_children:
        while p is not sentinel and pk < ck:
            p = next(pit, sentinel)
            if p is not sentinel:
                npk, npv = p
                if npk == pk:
                    continue  # duplicate parent key: first wins
                pk, pv = npk, npv
        if p is not sentinel and pk == ck:
            yield seq, row, pv
        else:
            yield seq, row, None


def _run_gen_job(job: _TableJob) -> _JobResult:
    """Read one table, apply its join, emit sorted event runs."""
    spec = job.spec
    meter = _Meter()
    used_sort_merge = False
    join_map = None
    floor = 0
    if spec.join is not None:
        join_map, est = _load_join_map(job)
        if join_map is None:
            used_sort_merge = True
        else:
            floor = est
            meter.add(est)

    reader, header = open_csv_reader(job.csv_path)
    rows_read = 0
    events = 0
    with reader:
        encode = _row_event_encoder(job, header)
        spiller = _EventRunSpiller(
            job.budget, job.tmp_dir, f"{spec.name}-run", meter, floor=floor
        )
        if used_sort_merge:
            reader.close()
            for seq, row, joined in _sort_merge_joined_rows(job, meter):
                key, rec = encode(row, seq, joined)
                spiller.add(key, rec)
                rows_read += 1
                events += 1
        else:
            on_idx = None
            if spec.join is not None:
                if spec.join.on in header:
                    on_idx = header.index(spec.join.on)
                else:
                    raise JoinKeyError(
                        f"table {spec.name!r}: join.on column {spec.join.on!r} "
                        f"not found in {job.csv_path}"
                    )
            get_joined = join_map.get if join_map is not None else None
            for seq, row in enumerate(reader.rows()):
                joined = None
                if get_joined is not None:
                    jk = row[on_idx] if on_idx < len(row) else ""
                    joined = get_joined(jk)
                key, rec = encode(row, seq, joined)
                spiller.add(key, rec)
                rows_read += 1
                events += 1
    run_paths = spiller.finish()
    return _JobResult(
        run_paths=run_paths,
        rows_read=rows_read,
        events=events,
        high_water=meter.high,
        spill_runs=len(run_paths),
        used_sort_merge_join=used_sort_merge,
    )


# --------------------------------------------------------------------------
# public operations


def external_sort(
    events: Iterable[Event],
    cfg: IngestConfig,
    stats: Optional[dict] = None,
    run_budget_bytes: Optional[int] = None,
) -> Iterator[Event]:
    """Sort an arbitrary event stream by the canonical key under the budget.

    Stable for equal keys: runs are stable-sorted and the k-way merge
    prefers earlier runs on ties. ``run_budget_bytes`` overrides the spill
    threshold (instrumentation hook for exercising multi-run merges
    without gigabytes of input).
    """
    import tempfile

    tmp_dir = tempfile.mkdtemp(prefix="extsort-")
    meter = _Meter()
    budget = run_budget_bytes if run_budget_bytes is not None else cfg.mem_budget_bytes
    spiller = _EventRunSpiller(budget, tmp_dir, "sort", meter)
    try:
        for e in events:
            ts = e.timestamp
            pid_b = e.patient_id.encode("utf-8")
            etype_b = e.event_type.encode("utf-8")
            if ts is None:
                key = (pid_b, 0, 0, etype_b, e.seq)
            else:
                key = (pid_b, 1, timestamp_to_micros(ts), etype_b, e.seq)
            spiller.add(key, evp.encode_event(e))
        runs = spiller.finish()
        if stats is not None:
            stats["spill_runs"] = len(runs)
            stats["buffer_high_water"] = meter.high
        merged = heapq.merge(
            *[evp.iter_run_records(p) for p in runs], key=itemgetter(0)
        )
        for _, rec_bytes in merged:
            yield _decode_record_bytes(rec_bytes)
    finally:
        shutil.rmtree(tmp_dir, ignore_errors=True)


def _decode_record_bytes(rec: bytes) -> Event:
    return evp.record_to_event(evp.decode_record(rec))


def write_partitions(
    sorted_events: Iterable[Event], cfg: IngestConfig
) -> list[EventPartition]:
    """Cut a canonically sorted stream into patient-aligned partition files."""
    pairs = (
        (e.patient_id.encode("utf-8"), evp.encode_event(e)) for e in sorted_events
    )
    return _write_partition_records(
        pairs, cfg.out_dir, cfg.target_partition_events
    )


def _write_partition_records(
    pairs: Iterable[tuple[bytes, bytes]], out_dir: str, target: int
) -> list[EventPartition]:
    part_dir = os.path.join(out_dir, PARTITION_DIR)
    os.makedirs(part_dir, exist_ok=True)
    partitions: list[EventPartition] = []
    writer: Optional[evp.EvpWriter] = None
    last_pid: Optional[bytes] = None

    def close_current():
        nonlocal writer
        footer = writer.close()
        rel = os.path.join(PARTITION_DIR, os.path.basename(writer.path))
        partitions.append(
            EventPartition(
                path=rel,
                min_patient_id=footer.min_pid,
                max_patient_id=footer.max_pid,
                event_count=footer.event_count,
                patient_count=footer.patient_count,
            )
        )
        writer = None

    for pid, rec in pairs:
        if writer is not None and writer.event_count >= target and pid != last_pid:
            close_current()
        if writer is None:
            path = os.path.join(part_dir, f"part-{len(partitions):05d}.evp")
            writer = evp.EvpWriter(path)
        writer.add(pid, rec)
        last_pid = pid
    if writer is not None:
        close_current()
    return partitions


def _created_at(paths: Iterable[str]) -> str:
    """Deterministic creation stamp: newest input table mtime, UTC."""
    mtimes = [os.path.getmtime(p) for p in paths]
    newest = max(mtimes) if mtimes else 0.0
    return (
        datetime.fromtimestamp(int(newest), tz=timezone.utc)
        .replace(tzinfo=None)
        .isoformat(sep=" ")
    )


def manifest_to_json(m: CacheManifest) -> str:
    doc = {
        "dataset_name": m.dataset_name,
        "descriptor_digest": m.descriptor_digest,
        "partitions": [
            {
                "path": p.path,
                "min_patient_id": p.min_patient_id,
                "max_patient_id": p.max_patient_id,
                "event_count": p.event_count,
                "patient_count": p.patient_count,
            }
            for p in m.partitions
        ],
        "total_events": m.total_events,
        "total_patients": m.total_patients,
        "created_at": m.created_at,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def manifest_from_json(text: str, source: str = "<manifest>") -> CacheManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}: not valid JSON: {exc}") from exc
    try:
        partitions = tuple(
            EventPartition(
                path=p["path"],
                min_patient_id=p["min_patient_id"],
                max_patient_id=p["max_patient_id"],
                event_count=int(p["event_count"]),
                patient_count=int(p["patient_count"]),
            )
            for p in doc["partitions"]
        )
        manifest = CacheManifest(
            dataset_name=doc["dataset_name"],
            descriptor_digest=doc["descriptor_digest"],
            partitions=partitions,
            total_events=int(doc["total_events"]),
            total_patients=int(doc["total_patients"]),
            created_at=doc["created_at"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{source}: malformed manifest: {exc}") from exc
    validate_manifest(manifest, source)
    return manifest


def validate_manifest(m: CacheManifest, source: str = "<manifest>"):
    prev_max: Optional[str] = None
    total = 0
    patients = 0
    for p in m.partitions:
        if p.min_patient_id > p.max_patient_id:
            raise ManifestError(
                f"{source}: partition {p.path} has min > max patient id"
            )
        if prev_max is not None and p.min_patient_id <= prev_max:
            raise ManifestError(
                f"{source}: partition ranges overlap or are out of order at "
                f"{p.path}"
            )
        prev_max = p.max_patient_id
        total += p.event_count
        patients += p.patient_count
    if total != m.total_events:
        raise ManifestError(
            f"{source}: total_events {m.total_events} != sum of partition "
            f"counts {total}"
        )
    if patients != m.total_patients:
        raise ManifestError(
            f"{source}: total_patients {m.total_patients} != sum of partition "
            f"patient counts {patients}"
        )


def load_manifest(cache_dir: str) -> CacheManifest:
    path = os.path.join(cache_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_json(text, source=path)


def ingest(
    descriptor: DatasetDescriptor, cfg: IngestConfig, base_dir: str = "."
) -> CacheManifest:
    """Build (or reuse) the partitioned event cache for a dataset.

    Table paths in the descriptor resolve relative to ``base_dir``.
    """
    canonical = serialize_descriptor(descriptor)
    digest = descriptor_digest(canonical)
    out_dir = cfg.out_dir
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)

    if os.path.exists(manifest_path):
        existing = load_manifest(out_dir)
        if existing.descriptor_digest == digest:
            return existing
        raise IoError(
            f"cache at {out_dir} was built from a different descriptor "
            f"(digest {existing.descriptor_digest[:12]}… != {digest[:12]}…)"
        )
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        raise IoError(f"out_dir {out_dir} is not empty and holds no valid cache")

    table_paths = {}
    for name, spec in descriptor.tables.items():
        path = os.path.join(base_dir, spec.file)
        if not os.path.isfile(path):
            raise IoError(f"table {name!r}: file not found: {path}")
        if not os.access(path, os.R_OK):
            raise IoError(f"table {name!r}: file not readable: {path}")
        table_paths[name] = path

    os.makedirs(out_dir, exist_ok=True)
    tmp_dir = os.path.join(out_dir, "tmp-ingest")
    os.makedirs(tmp_dir, exist_ok=True)
    try:
        specs = list(descriptor.tables.values())
        concurrency = max(1, min(cfg.workers, len(specs)))
        worker_budget = cfg.mem_budget_bytes // concurrency
        hash_limit = (
            cfg.join_hash_limit_bytes
            if cfg.join_hash_limit_bytes is not None
            else worker_budget // 2
        )
        jobs = []
        for spec in specs:
            parent_spec = None
            parent_path = None
            if spec.join is not None:
                parent_spec = descriptor.tables[spec.join.table]
                parent_path = table_paths[parent_spec.name]
            jobs.append(
                _TableJob(
                    spec=spec,
                    csv_path=table_paths[spec.name],
                    parent_spec=parent_spec,
                    parent_csv_path=parent_path,
                    budget=worker_budget,
                    hash_limit=hash_limit,
                    tmp_dir=tmp_dir,
                )
            )
        # biggest tables first packs better under the worker cap; output
        # bytes do not depend on job order
        jobs.sort(key=lambda j: os.path.getsize(j.csv_path), reverse=True)
        results = run_jobs(_run_gen_job, jobs, cfg.workers, tmp_dir, "spawn")

        all_runs: list[str] = []
        for r in results:
            all_runs.extend(r.run_paths)
        rows_read = sum(r.rows_read for r in results)
        events_emitted = sum(r.events for r in results)

        merged = heapq.merge(
            *[evp.iter_run_records(p) for p in all_runs], key=itemgetter(0)
        )
        pairs = ((key[0], rec) for key, rec in merged)
        partitions = _write_partition_records(
            pairs, out_dir, cfg.target_partition_events
        )

        total_events = sum(p.event_count for p in partitions)
        total_patients = sum(p.patient_count for p in partitions)
        if total_events != rows_read or events_emitted != rows_read:
            raise AssertionError(
                f"conservation violated: read {rows_read} rows but wrote "
                f"{total_events} events"
            )

        manifest = CacheManifest(
            dataset_name=descriptor.dataset_name,
            descriptor_digest=digest,
            partitions=tuple(partitions),
            total_events=total_events,
            total_patients=total_patients,
            created_at=_created_at(table_paths.values()),
        )
        validate_manifest(manifest, source="<new manifest>")

        stats = {
            "rows_read": rows_read,
            "events_written": total_events,
            "spill_runs": sum(r.spill_runs for r in results),
            "max_job_buffer_high_water": max((r.high_water for r in results), default=0),
            "concurrent_jobs": concurrency,
            "buffer_high_water_bound": max(
                (r.high_water for r in results), default=0
            )
            * concurrency,
            "worker_budget": worker_budget,
            "sort_merge_join_tables": [
                j.spec.name
                for j, r in zip(jobs, results)
                if r.used_sort_merge_join
            ],
        }
        _atomic_write(os.path.join(out_dir, STATS_NAME), json.dumps(stats, indent=2) + "\n")
        _atomic_write(manifest_path, manifest_to_json(manifest))
        return manifest
    except Exception:
        # leave no partial cache behind: a later run must not mistake it
        shutil.rmtree(os.path.join(out_dir, PARTITION_DIR), ignore_errors=True)
        for name in (STATS_NAME,):
            p = os.path.join(out_dir, name)
            if os.path.exists(p):
                os.unlink(p)
        raise
    finally:
        shutil.rmtree(tmp_dir, ignore_errors=True)


def _atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def load_ingest_stats(cache_dir: str) -> dict:
    with open(os.path.join(cache_dir, STATS_NAME), "r", encoding="utf-8") as f:
        return json.load(f)
