"""Declarative dataset configuration mapping raw CSV tables onto events.

The config is a strict YAML subset: nested maps, sequences, and scalar
strings/integers. Unknown keys are hard errors — a typo in a column name
must fail loudly, not silently drop a feature.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import ValidationError
from .events import RESERVED_ATTRIBUTE_NAMES

SUPPORTED_VERSION = 1

_TABLE_KEYS = {
    "file",
    "patient_id_column",
    "timestamp_column",
    "timestamp_format",
    "attribute_columns",
    "join",
}
_JOIN_KEYS = {"table", "on", "columns"}
_TOP_KEYS = {"version", "dataset_name", "tables"}


@dataclass(frozen=True)
class JoinSpec:
    """Pull columns from a parent table by equality on one key column."""

    table: str
    on: str
    columns: tuple[str, ...]


@dataclass(frozen=True)
class TableSpec:
    """How one CSV file becomes events of one type."""

    name: str
    file: str
    patient_id_column: str
    attribute_columns: tuple[str, ...]
    timestamp_column: Optional[str] = None
    timestamp_format: Optional[str] = None
    join: Optional[JoinSpec] = None

    def all_attribute_columns(self) -> tuple[str, ...]:
        """Own attribute columns followed by joined columns, in order."""
        if self.join is None:
            return self.attribute_columns
        return self.attribute_columns + self.join.columns


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_name: str
    tables: dict[str, TableSpec] = field(default_factory=dict)
    version: int = SUPPORTED_VERSION


def _require_str(value, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(f"{where} must be a non-empty string, got {value!r}")
    return value


def _parse_join(raw, table_name: str) -> JoinSpec:
    if not isinstance(raw, dict):
        raise ValidationError(f"table {table_name!r}: join must be a map")
    # YAML 1.1 reads a bare `on` key as boolean true; it is our key name
    raw = {("on" if k is True else k): v for k, v in raw.items()}
    unknown = set(raw) - _JOIN_KEYS
    if unknown:
        raise ValidationError(
            f"table {table_name!r}: unknown join key(s) {sorted(unknown)}"
        )
    for k in _JOIN_KEYS:
        if k not in raw:
            raise ValidationError(f"table {table_name!r}: join missing key {k!r}")
    columns = raw["columns"]
    if not isinstance(columns, list) or not columns:
        raise ValidationError(
            f"table {table_name!r}: join.columns must be a non-empty list"
        )
    return JoinSpec(
        table=_require_str(raw["table"], f"table {table_name!r}: join.table"),
        on=_require_str(raw["on"], f"table {table_name!r}: join.on"),
        columns=tuple(
            _require_str(c, f"table {table_name!r}: join.columns entry") for c in columns
        ),
    )


def _parse_table(name: str, raw) -> TableSpec:
    if not isinstance(raw, dict):
        raise ValidationError(f"table {name!r} must be a map")
    unknown = set(raw) - _TABLE_KEYS
    if unknown:
        raise ValidationError(f"table {name!r}: unknown key(s) {sorted(unknown)}")
    for k in ("file", "patient_id_column", "attribute_columns"):
        if k not in raw:
            raise ValidationError(f"table {name!r}: missing {k!r}")
    attr_cols = raw["attribute_columns"]
    if not isinstance(attr_cols, list) or not attr_cols:
        raise ValidationError(
            f"table {name!r}: attribute_columns must be a non-empty list"
        )
    attr_cols = tuple(
        _require_str(c, f"table {name!r}: attribute_columns entry") for c in attr_cols
    )
    pid_col = _require_str(raw["patient_id_column"], f"table {name!r}: patient_id_column")
    if pid_col in attr_cols:
        raise ValidationError(
            f"table {name!r}: patient_id_column {pid_col!r} may not also be "
            "an attribute column"
        )
    ts_col = raw.get("timestamp_column")
    if ts_col is not None:
        ts_col = _require_str(ts_col, f"table {name!r}: timestamp_column")
    ts_fmt = raw.get("timestamp_format")
    if ts_fmt is not None:
        ts_fmt = _require_str(ts_fmt, f"table {name!r}: timestamp_format")
        if ts_col is None:
            raise ValidationError(
                f"table {name!r}: timestamp_format given without timestamp_column"
            )
    join = _parse_join(raw["join"], name) if "join" in raw else None
    spec = TableSpec(
        name=name,
        file=_require_str(raw["file"], f"table {name!r}: file"),
        patient_id_column=pid_col,
        attribute_columns=attr_cols,
        timestamp_column=ts_col,
        timestamp_format=ts_fmt,
        join=join,
    )
    reserved = RESERVED_ATTRIBUTE_NAMES.intersection(spec.all_attribute_columns())
    if reserved:
        raise ValidationError(
            f"table {name!r}: column name(s) {sorted(reserved)} are reserved"
        )
    if join is not None and set(join.columns) & set(attr_cols):
        overlap = sorted(set(join.columns) & set(attr_cols))
        raise ValidationError(
            f"table {name!r}: join.columns {overlap} collide with attribute_columns"
        )
    return spec


def parse_descriptor(text: str) -> DatasetDescriptor:
    """Parse and validate a descriptor document.

    Raises:
        SyntaxError: the text is not well-formed.
        ValidationError: the structure is well-formed but invalid; the
            message names the offending table or key.
    """
    try:
        raw = yaml.safe_load(io.StringIO(text))
    except yaml.YAMLError as exc:
        raise SyntaxError(f"malformed descriptor: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("descriptor must be a map at the top level")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown top-level key(s) {sorted(unknown)}")
    for k in _TOP_KEYS:
        if k not in raw:
            raise ValidationError(f"missing top-level key {k!r}")
    version = raw["version"]
    if version != SUPPORTED_VERSION:
        raise ValidationError(f"unsupported version {version!r} (expected 1)")
    dataset_name = _require_str(raw["dataset_name"], "dataset_name")
    raw_tables = raw["tables"]
    if not isinstance(raw_tables, dict) or not raw_tables:
        raise ValidationError("tables must be a non-empty map")
    tables: dict[str, TableSpec] = {}
    for name, body in raw_tables.items():
        name = _require_str(name, "table name")
        if name in tables:
            raise ValidationError(f"duplicate table name {name!r}")
        tables[name] = _parse_table(name, body)
    for spec in tables.values():
        if spec.join is not None:
            if spec.join.table == spec.name:
                raise ValidationError(
                    f"table {spec.name!r}: join target may not be the table itself"
                )
            if spec.join.table not in tables:
                raise ValidationError(
                    f"table {spec.name!r}: unknown join target {spec.join.table!r}"
                )
    return DatasetDescriptor(dataset_name=dataset_name, tables=tables)


def serialize_descriptor(d: DatasetDescriptor) -> str:
    """Canonical text form; `parse(serialize(parse(t)))` equals `parse(t)`."""
    doc: dict = {"version": d.version, "dataset_name": d.dataset_name, "tables": {}}
    for name, t in d.tables.items():
        body: dict = {
            "file": t.file,
            "patient_id_column": t.patient_id_column,
        }
        if t.timestamp_column is not None:
            body["timestamp_column"] = t.timestamp_column
        if t.timestamp_format is not None:
            body["timestamp_format"] = t.timestamp_format
        body["attribute_columns"] = list(t.attribute_columns)
        if t.join is not None:
            body["join"] = {
                "table": t.join.table,
                "on": t.join.on,
                "columns": list(t.join.columns),
            }
        doc["tables"][name] = body
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def descriptor_digest(text: str) -> str:
    """Content hash of the descriptor text; keys cache idempotence."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
