"""Lazy read layer over the partitioned cache.

Opening a store reads only the manifest. Point lookups binary-search the
partition zone maps and scan exactly one partition; batch iteration walks
partitions sequentially, holding one batch of patients at a time.
"""

from __future__ import annotations

import hashlib
import os
import threading
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional

from . import evp
from .errors import ManifestError
from .events import Event, EventFilter, PatientRecord
from .ingest import MANIFEST_NAME, CacheManifest, manifest_from_json

DEFAULT_BATCH_SIZE = 128


@dataclass(frozen=True)
class PatientBatch:
    records: tuple[PatientRecord, ...]
    batch_index: int


class _HandlePool:
    """Bounded pool of open partition handles, borrowed exclusively."""

    def __init__(self, limit: int):
        self.limit = limit
        self._lock = threading.Lock()
        self._idle: OrderedDict[str, object] = OrderedDict()

    def acquire(self, path: str):
        with self._lock:
            f = self._idle.pop(path, None)
        if f is not None:
            return f
        return open(path, "rb")

    def release(self, path: str, f):
        with self._lock:
            if path in self._idle:
                f.close()
                return
            self._idle[path] = f
            while len(self._idle) > self.limit:
                _, old = self._idle.popitem(last=False)
                old.close()

    def close_all(self):
        with self._lock:
            for f in self._idle.values():
                f.close()
            self._idle.clear()


class Store:
    """Read-only view of a cache directory; safe to share across processes."""

    def __init__(
        self,
        root: str,
        manifest: CacheManifest,
        handle_limit: int = 16,
        manifest_bytes: Optional[bytes] = None,
    ):
        self.root = root
        self.manifest = manifest
        self.manifest_bytes_read = len(manifest_bytes) if manifest_bytes else 0
        self.cache_digest = (
            hashlib.sha256(manifest_bytes).hexdigest() if manifest_bytes else ""
        )
        self.partition_bytes_read = evp.ByteCounter()
        self.batch_event_high_water = 0
        self._pool = _HandlePool(handle_limit)
        self._mins = [p.min_patient_id for p in manifest.partitions]
        self._footers: dict[int, evp.PartitionFooter] = {}
        # global patient ordinal at which each partition starts
        self._patient_offsets = []
        acc = 0
        for p in manifest.partitions:
            self._patient_offsets.append(acc)
            acc += p.patient_count

    @property
    def total_patients(self) -> int:
        return self.manifest.total_patients

    @property
    def total_events(self) -> int:
        return self.manifest.total_events

    def partition_path(self, index: int) -> str:
        return os.path.join(self.root, self.manifest.partitions[index].path)

    def _data_end(self, index: int) -> int:
        footer = self._footers.get(index)
        if footer is None:
            footer = evp.read_footer(
                self.partition_path(index), self.partition_bytes_read
            )
            self._footers[index] = footer
        return footer.data_end

    def close(self):
        self._pool.close_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- point lookup --------------------------------------------------

    def find_partition(self, patient_id: str) -> Optional[int]:
        idx = bisect_right(self._mins, patient_id) - 1
        if idx < 0:
            return None
        part = self.manifest.partitions[idx]
        if patient_id > part.max_patient_id:
            return None
        return idx

    def get_events(
        self, patient_id: str, filter: Optional[EventFilter] = None
    ) -> list[Event]:
        idx = self.find_partition(patient_id)
        if idx is None:
            return []
        path = self.partition_path(idx)
        data_end = self._data_end(idx)
        f = self._pool.acquire(path)
        try:
            events = evp.scan_patient_events(
                path,
                patient_id,
                data_end=data_end,
                counter=self.partition_bytes_read,
                file=f,
            )
        finally:
            self._pool.release(path, f)
        if filter is not None:
            events = [e for e in events if filter.matches(e)]
        return events

    # -- sequential iteration -------------------------------------------

    def iter_patients_from(
        self, start_ordinal: int = 0
    ) -> Iterator[PatientRecord]:
        """Yield patients in global order starting at a patient ordinal."""
        if start_ordinal >= self.total_patients:
            return
        part_idx = bisect_right(self._patient_offsets, start_ordinal) - 1
        skip = start_ordinal - self._patient_offsets[part_idx]
        for idx in range(part_idx, len(self.manifest.partitions)):
            path = self.partition_path(idx)
            data_end = self._data_end(idx)
            f = self._pool.acquire(path)
            try:
                for pid, events in evp.iter_patient_groups(
                    path,
                    skip_patients=skip,
                    data_end=data_end,
                    counter=self.partition_bytes_read,
                    file=f,
                ):
                    yield PatientRecord(patient_id=pid, events=tuple(events))
            finally:
                self._pool.release(path, f)
            skip = 0


def open_store(root: str, handle_limit: int = 16) -> Store:
    """Open a cache; reads only the manifest, never partition payloads."""
    manifest_path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(manifest_path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    manifest = manifest_from_json(raw.decode("utf-8"), source=manifest_path)
    return Store(root, manifest, handle_limit=handle_limit, manifest_bytes=raw)


def get_events(
    store: Store, patient_id: str, filter: Optional[EventFilter] = None
) -> list[Event]:
    return store.get_events(patient_id, filter)


def iter_patient_batches(
    store: Store, batch_size: int = DEFAULT_BATCH_SIZE
) -> Iterator[PatientBatch]:
    """Every patient exactly once, in ascending id order, in batches.

    Holds at most one batch of decoded patients; the instrumented
    high-water mark of buffered events is kept on the store.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    buffer: list[PatientRecord] = []
    buffered_events = 0
    batch_index = 0
    for record in store.iter_patients_from(0):
        buffer.append(record)
        buffered_events += record.num_events
        if buffered_events > store.batch_event_high_water:
            store.batch_event_high_water = buffered_events
        if len(buffer) == batch_size:
            yield PatientBatch(records=tuple(buffer), batch_index=batch_index)
            batch_index += 1
            buffer = []
            buffered_events = 0
    if buffer:
        yield PatientBatch(records=tuple(buffer), batch_index=batch_index)
