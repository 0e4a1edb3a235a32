"""Two-layer patient/event data model and the canonical global event order.

Everything downstream (the partitioned cache, lazy reads, task batching)
assumes one total order over events, produced by :func:`event_sort_key`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional

from .errors import ValidationError

RESERVED_ATTRIBUTE_NAMES = frozenset({"patient_id", "timestamp", "event_type"})

_EPOCH = datetime(1970, 1, 1)
_MICROSECOND = timedelta(microseconds=1)


def timestamp_to_micros(ts: datetime) -> int:
    """Convert a naive datetime to integer microseconds since the epoch."""
    return (ts - _EPOCH) // _MICROSECOND


def micros_to_timestamp(us: int) -> datetime:
    return _EPOCH + timedelta(microseconds=us)


@dataclass(frozen=True, slots=True)
class Event:
    """A single timestamped-or-untimestamped record belonging to a patient.

    Args:
        patient_id: non-empty opaque identifier; compared by byte order.
        event_type: name of the source table the event came from.
        timestamp: optional naive instant (microsecond resolution).
        seq: ingestion order of the row within its source table.
        attributes: raw cell values keyed by column name, in column order;
            missing cells are simply absent.
    """

    patient_id: str
    event_type: str
    timestamp: Optional[datetime] = None
    seq: int = 0
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient_id:
            raise ValidationError("patient_id must be non-empty")
        if self.seq < 0:
            raise ValidationError("seq must be non-negative")
        bad = RESERVED_ATTRIBUTE_NAMES.intersection(self.attributes)
        if bad:
            raise ValidationError(
                f"attributes may not use reserved names: {sorted(bad)}"
            )

    def get(self, name: str, default: Optional[str] = None) -> Optional[str]:
        return self.attributes.get(name, default)


def event_sort_key(e: Event) -> tuple[str, int, int, str, int]:
    """Total order over events: patient, then untimestamped-first, then time.

    Returns ``(patient_id, ts_class, timestamp_us, event_type, seq)`` where
    ``ts_class`` is 0 for absent timestamps and 1 otherwise, so untimestamped
    events (static demographics) sort before a patient's dated events.
    String components compare by code point, which for UTF-8 text is
    identical to byte order.
    """
    if e.timestamp is None:
        return (e.patient_id, 0, 0, e.event_type, e.seq)
    return (e.patient_id, 1, timestamp_to_micros(e.timestamp), e.event_type, e.seq)


@dataclass(frozen=True, slots=True)
class PatientRecord:
    """All events of one patient, sorted by :func:`event_sort_key`."""

    patient_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        for e in self.events:
            if e.patient_id != self.patient_id:
                raise ValidationError(
                    f"event patient_id {e.patient_id!r} != record "
                    f"patient_id {self.patient_id!r}"
                )

    def events_of_type(self, event_type: str) -> list[Event]:
        return [e for e in self.events if e.event_type == event_type]

    @property
    def num_events(self) -> int:
        return len(self.events)


@dataclass(frozen=True, slots=True)
class EventFilter:
    """Optional predicate used by event retrieval.

    ``time_range`` is half-open ``[start, end)``; events without a timestamp
    never match a time-filtered query. ``attribute_equals`` requires every
    listed attribute to be present with the given value.
    """

    event_types: Optional[frozenset[str]] = None
    time_range: Optional[tuple[datetime, datetime]] = None
    attribute_equals: Optional[dict[str, str]] = None

    def __post_init__(self):
        if self.time_range is not None:
            start, end = self.time_range
            if not start < end:
                raise ValidationError("time_range requires start < end")

    def matches(self, e: Event) -> bool:
        if self.event_types is not None and e.event_type not in self.event_types:
            return False
        if self.time_range is not None:
            if e.timestamp is None:
                return False
            start, end = self.time_range
            if not (start <= e.timestamp < end):
                return False
        if self.attribute_equals:
            for k, v in self.attribute_equals.items():
                if e.attributes.get(k) != v:
                    return False
        return True
