"""EVP partition files: the row-oriented on-disk event format.

Layout (all integers little-endian):

    magic "EVP1" | format_version u32
    per event: patient_id_len u32, patient_id bytes,
               flags u8 (bit0 = has_timestamp),
               timestamp i64 microseconds (present iff flag),
               event_type_len u16 + bytes, seq u64,
               attr_count u16, then per attribute
               (key_len u16 + bytes, val_len u32 + bytes)
    footer: min_pid len u32 + bytes, max_pid len u32 + bytes,
            event_count u64, patient_count u64, footer_offset u64,
            magic "EVPF"

Events are stored in canonical sort order, so one patient's records are
contiguous and a scan can stop as soon as it passes the target id. The
footer's min/max ids are the partition's zone-map statistic.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import IoError
from .events import Event, micros_to_timestamp, timestamp_to_micros

MAGIC = b"EVP1"
FOOTER_MAGIC = b"EVPF"
FORMAT_VERSION = 1
HEADER_LEN = 8

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_FOOTER_TAIL = struct.Struct("<Q4s")

_CHUNK = 1 << 20


class ByteCounter:
    """Counts bytes physically read; lazy-IO tests assert against this."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += n


def encode_record(
    pid: bytes,
    ts_us: Optional[int],
    event_type: bytes,
    seq: int,
    attrs: list[tuple[bytes, bytes]],
) -> bytes:
    parts = [_U32.pack(len(pid)), pid]
    if ts_us is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(_I64.pack(ts_us))
    parts.append(_U16.pack(len(event_type)))
    parts.append(event_type)
    parts.append(_U64.pack(seq))
    parts.append(_U16.pack(len(attrs)))
    for k, v in attrs:
        parts.append(_U16.pack(len(k)))
        parts.append(k)
        parts.append(_U32.pack(len(v)))
        parts.append(v)
    return b"".join(parts)


def encode_event(e: Event) -> bytes:
    ts_us = None if e.timestamp is None else timestamp_to_micros(e.timestamp)
    attrs = [
        (k.encode("utf-8"), v.encode("utf-8")) for k, v in e.attributes.items()
    ]
    return encode_record(
        e.patient_id.encode("utf-8"), ts_us, e.event_type.encode("utf-8"), e.seq, attrs
    )


def record_to_event(rec: tuple) -> Event:
    pid, ts_us, etype, seq, attrs = rec
    return Event(
        patient_id=pid.decode("utf-8"),
        event_type=etype.decode("utf-8"),
        timestamp=None if ts_us is None else micros_to_timestamp(ts_us),
        seq=seq,
        attributes={k.decode("utf-8"): v.decode("utf-8") for k, v in attrs},
    )


def record_sort_key(rec: tuple) -> tuple:
    """Canonical key on raw records; byte-compares ids and types directly."""
    pid, ts_us, etype, seq, _ = rec
    if ts_us is None:
        return (pid, 0, 0, etype, seq)
    return (pid, 1, ts_us, etype, seq)


@dataclass(frozen=True)
class PartitionFooter:
    min_pid: str
    max_pid: str
    event_count: int
    patient_count: int
    data_end: int


class EvpWriter:
    """Writes records (already in canonical order) and finalizes the footer."""

    def __init__(self, path: str):
        self.path = path
        try:
            self._f = open(path, "wb")
        except OSError as exc:
            raise IoError(f"cannot create partition {path}: {exc}") from exc
        self._f.write(MAGIC)
        self._f.write(_U32.pack(FORMAT_VERSION))
        self._offset = HEADER_LEN
        self.event_count = 0
        self.patient_count = 0
        self._min_pid: Optional[bytes] = None
        self._last_pid: Optional[bytes] = None

    def add(self, pid: bytes, record: bytes):
        if self._min_pid is None:
            self._min_pid = pid
        if pid != self._last_pid:
            self.patient_count += 1
            self._last_pid = pid
        self._f.write(record)
        self._offset += len(record)
        self.event_count += 1

    def add_event(self, e: Event):
        self.add(e.patient_id.encode("utf-8"), encode_event(e))

    def close(self) -> PartitionFooter:
        if self.event_count == 0:
            raise IoError(f"refusing to finalize empty partition {self.path}")
        min_pid = self._min_pid
        max_pid = self._last_pid
        footer_offset = self._offset
        self._f.write(_U32.pack(len(min_pid)))
        self._f.write(min_pid)
        self._f.write(_U32.pack(len(max_pid)))
        self._f.write(max_pid)
        self._f.write(_U64.pack(self.event_count))
        self._f.write(_U64.pack(self.patient_count))
        self._f.write(_FOOTER_TAIL.pack(footer_offset, FOOTER_MAGIC))
        self._f.close()
        return PartitionFooter(
            min_pid=min_pid.decode("utf-8"),
            max_pid=max_pid.decode("utf-8"),
            event_count=self.event_count,
            patient_count=self.patient_count,
            data_end=footer_offset,
        )

    def abort(self):
        self._f.close()
        if os.path.exists(self.path):
            os.unlink(self.path)


def read_footer(path: str, counter: Optional[ByteCounter] = None) -> PartitionFooter:
    try:
        with open(path, "rb") as f:
            header = f.read(HEADER_LEN)
            if len(header) != HEADER_LEN or header[:4] != MAGIC:
                raise IoError(f"{path}: not an EVP file")
            version = _U32.unpack_from(header, 4)[0]
            if version != FORMAT_VERSION:
                raise IoError(f"{path}: unsupported EVP version {version}")
            f.seek(-_FOOTER_TAIL.size, os.SEEK_END)
            tail = f.read(_FOOTER_TAIL.size)
            footer_offset, magic = _FOOTER_TAIL.unpack(tail)
            if magic != FOOTER_MAGIC:
                raise IoError(f"{path}: bad footer magic")
            f.seek(footer_offset)
            body = f.read()
            if counter is not None:
                counter.add(HEADER_LEN + _FOOTER_TAIL.size + len(body))
    except OSError as exc:
        raise IoError(f"cannot read partition {path}: {exc}") from exc
    pos = 0
    (min_len,) = _U32.unpack_from(body, pos)
    pos += 4
    min_pid = body[pos : pos + min_len]
    pos += min_len
    (max_len,) = _U32.unpack_from(body, pos)
    pos += 4
    max_pid = body[pos : pos + max_len]
    pos += max_len
    (event_count,) = _U64.unpack_from(body, pos)
    pos += 8
    (patient_count,) = _U64.unpack_from(body, pos)
    return PartitionFooter(
        min_pid=min_pid.decode("utf-8"),
        max_pid=max_pid.decode("utf-8"),
        event_count=event_count,
        patient_count=patient_count,
        data_end=footer_offset,
    )


class _Cursor:
    """Chunked forward reader over a partition's record region.

    ``next_record(full)`` returns decoded fields, or with ``full=False``
    just the patient id after cheaply walking past the record body. The
    last record's span stays inside the buffer until the next call, so
    ``decode_current()`` can upgrade a cheap parse to a full one.
    """

    __slots__ = ("f", "buf", "pos", "base", "data_end", "counter", "_start")

    def __init__(
        self,
        f,
        data_end: int,
        counter: Optional[ByteCounter],
        data_start: int = HEADER_LEN,
    ):
        self.f = f
        self.buf = b""
        self.pos = 0
        self.base = data_start
        self.data_end = data_end
        self.counter = counter
        self._start = 0
        f.seek(data_start)

    def _refill(self) -> bool:
        self.buf = self.buf[self.pos :]
        self.base += self.pos
        self.pos = 0
        want = min(_CHUNK, self.data_end - (self.base + len(self.buf)))
        if want <= 0:
            return False
        chunk = self.f.read(want)
        if not chunk:
            return False
        if self.counter is not None:
            self.counter.add(len(chunk))
        self.buf += chunk
        return True

    def next_record(self, full: bool):
        while True:
            start = self.pos
            rec = self._try_parse(full)
            if rec is not None:
                self._start = start
                return rec
            if self.base + self.pos >= self.data_end:
                return None
            if not self._refill():
                raise IoError("truncated EVP record region")

    def decode_current(self):
        """Full parse of the record most recently returned by next_record."""
        end = self.pos
        self.pos = self._start
        rec = self._try_parse(True)
        self.pos = end
        return rec

    def _try_parse(self, full: bool):
        buf = self.buf
        pos = self.pos
        limit = min(len(buf), self.data_end - self.base)
        if pos + 4 > limit:
            return None
        (pid_len,) = _U32.unpack_from(buf, pos)
        pos += 4
        if pos + pid_len + 1 > limit:
            return None
        pid = buf[pos : pos + pid_len]
        pos += pid_len
        flags = buf[pos]
        pos += 1
        ts_us = None
        if flags & 1:
            if pos + 8 > limit:
                return None
            (ts_us,) = _I64.unpack_from(buf, pos)
            pos += 8
        if pos + 2 > limit:
            return None
        (etype_len,) = _U16.unpack_from(buf, pos)
        pos += 2
        if pos + etype_len + 10 > limit:
            return None
        etype = buf[pos : pos + etype_len] if full else None
        pos += etype_len
        if full:
            (seq,) = _U64.unpack_from(buf, pos)
        else:
            seq = 0
        pos += 8
        (attr_count,) = _U16.unpack_from(buf, pos)
        pos += 2
        attrs = [] if full else None
        for _ in range(attr_count):
            if pos + 2 > limit:
                return None
            (klen,) = _U16.unpack_from(buf, pos)
            pos += 2
            if pos + klen + 4 > limit:
                return None
            kend = pos + klen
            (vlen,) = _U32.unpack_from(buf, kend)
            vstart = kend + 4
            if vstart + vlen > limit:
                return None
            if full:
                attrs.append((buf[pos:kend], buf[vstart : vstart + vlen]))
            pos = vstart + vlen
        self.pos = pos
        if full:
            return (pid, ts_us, etype, seq, attrs)
        return (pid, None, None, 0, None)


class _MaybeOwned:
    """Context manager that closes the file only if it opened it."""

    def __init__(self, path: str, file):
        self._close = file is None
        self.f = open(path, "rb") if file is None else file

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        if self._close:
            self.f.close()
        return False


def iter_patient_groups(
    path: str,
    skip_patients: int = 0,
    data_end: Optional[int] = None,
    counter: Optional[ByteCounter] = None,
    file=None,
) -> Iterator[tuple[str, list[Event]]]:
    """Yield ``(patient_id, events)`` groups in canonical order.

    ``skip_patients`` walks past that many leading patients without
    decoding their records (record bodies are only length-stepped).
    """
    if data_end is None:
        data_end = read_footer(path, counter).data_end
    with _MaybeOwned(path, file) as f:
        cur = _Cursor(f, data_end, counter)
        group_pid: Optional[bytes] = None
        group: list[Event] = []
        if skip_patients > 0:
            distinct = 0
            prev: Optional[bytes] = None
            while True:
                rec = cur.next_record(False)
                if rec is None:
                    return
                pid = rec[0]
                if pid != prev:
                    distinct += 1
                    prev = pid
                    if distinct == skip_patients + 1:
                        # first record of the first wanted patient; upgrade it
                        full = cur.decode_current()
                        group_pid = full[0]
                        group = [record_to_event(full)]
                        break
        while True:
            rec = cur.next_record(True)
            if rec is None:
                break
            pid = rec[0]
            if pid != group_pid:
                if group_pid is not None:
                    yield group_pid.decode("utf-8"), group
                group_pid = pid
                group = []
            group.append(record_to_event(rec))
        if group_pid is not None:
            yield group_pid.decode("utf-8"), group


def scan_patient_events(
    path: str,
    patient_id: str,
    data_end: Optional[int] = None,
    counter: Optional[ByteCounter] = None,
    file=None,
) -> list[Event]:
    """All events of one patient; skips other records without decoding.

    Relies on canonical ordering to stop as soon as the scan passes the
    target id.
    """
    target = patient_id.encode("utf-8")
    if data_end is None:
        data_end = read_footer(path, counter).data_end
    out: list[Event] = []
    with _MaybeOwned(path, file) as f:
        cur = _Cursor(f, data_end, counter)
        while True:
            rec = cur.next_record(False)
            if rec is None:
                break
            pid = rec[0]
            if pid < target:
                continue
            if pid > target:
                break
            out.append(record_to_event(cur.decode_current()))
    return out


def decode_record(rec: bytes) -> tuple:
    """Parse one standalone encoded record back into raw fields."""
    import io

    cur = _Cursor(io.BytesIO(rec), len(rec), None, data_start=0)
    out = cur.next_record(True)
    if out is None:
        raise IoError("corrupt event record")
    return out


def iter_run_records(
    path: str, counter: Optional[ByteCounter] = None
) -> Iterator[tuple[tuple, bytes]]:
    """Yield ``(sort_key, record_bytes)`` from a headerless spill-run file."""
    try:
        size = os.path.getsize(path)
        f = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read spill run {path}: {exc}") from exc
    with f:
        cur = _Cursor(f, size, counter, data_start=0)
        while True:
            rec = cur.next_record(True)
            if rec is None:
                return
            yield record_sort_key(rec), bytes(cur.buf[cur._start : cur.pos])
