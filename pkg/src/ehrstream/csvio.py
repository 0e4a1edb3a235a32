"""Thin CSV access helpers: RFC 4180, UTF-8, first row is the header."""

from __future__ import annotations

import csv

from .errors import IoError, ValidationError

# single cells can exceed the default 128 KiB limit; budget enforcement
# happens downstream, not here
csv.field_size_limit(1 << 31)


class CsvReader:
    def __init__(self, path: str):
        self.path = path
        try:
            self._f = open(path, "r", encoding="utf-8", newline="")
        except OSError as exc:
            raise IoError(f"cannot open {path}: {exc}") from exc
        self._reader = csv.reader(self._f)

    def read_header(self) -> list[str]:
        header = next(self._reader, None)
        if header is None:
            raise ValidationError(f"{self.path}: missing header row")
        return header

    def rows(self):
        return self._reader

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def open_csv_reader(path: str) -> tuple[CsvReader, list[str]]:
    reader = CsvReader(path)
    try:
        header = reader.read_header()
    except Exception:
        reader.close()
        raise
    return reader, header
