"""Facade internals: manifest access, CLI invocation, shard decoding.

Everything here speaks the pipeline's *external* formats only:

* ``manifest.json``  - event-cache manifest (read to validate a cache)
* ``samples.json``   - sample-set manifest (shard list + schemas)
* ``procstate.*.json`` - fitted per-field processor state
* SMP1 shard files   - encoded samples (decoded here, independently)
* the ``ehr`` command line - ingest-side queries and task execution
"""

from __future__ import annotations

import json
import os
import re
import shutil
import struct
import subprocess
import sys
import tempfile
from typing import Iterator, Optional


class FacadeError(Exception):
    """Wraps pipeline failures, preserving the native error name."""

    def __init__(self, message: str, error_name: str = "FacadeError"):
        super().__init__(message)
        self.error_name = error_name


_ERROR_LINE = re.compile(r"^error: ([A-Za-z]+): (.*)$", re.MULTILINE)


def _ehr_command() -> list[str]:
    exe = shutil.which("ehr")
    if exe:
        return [exe]
    return [sys.executable, "-m", "ehrstream.cli"]


def _run_ehr(args: list[str]) -> str:
    proc = subprocess.run(
        _ehr_command() + args, capture_output=True, text=True
    )
    if proc.returncode != 0:
        match = _ERROR_LINE.search(proc.stderr or "")
        if match:
            raise FacadeError(match.group(2), error_name=match.group(1))
        raise FacadeError(
            f"ehr {' '.join(args)} failed with code {proc.returncode}: "
            f"{proc.stderr.strip()}"
        )
    return proc.stdout


# --------------------------------------------------------------------------
# SMP1 decoding (independent implementation of the documented format)

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")

_INPUT_TAGS = {"sequence": 0, "nested_sequence": 1, "multi_hot": 2, "raw": 3}
_OUTPUT_TAGS = {"binary": 0, "multiclass": 1, "multilabel": 2, "regression": 3}


def _decode_shard(path: str, input_schema: dict, output_schema: dict) -> Iterator[dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"SMP1":
        raise FacadeError(f"{path}: not an SMP1 shard")
    count, magic = struct.unpack("<Q4s", blob[-12:])
    if magic != b"SMPF":
        raise FacadeError(f"{path}: bad shard footer")
    pos = 8
    for _ in range(count):
        sample: dict = {}
        (pid_len,) = _U32.unpack_from(blob, pos)
        pos += 4
        sample["patient_id"] = blob[pos : pos + pid_len].decode("utf-8")
        pos += pid_len
        for name, kind in input_schema.items():
            tag = blob[pos]
            pos += 1
            if tag != _INPUT_TAGS[kind]:
                raise FacadeError(
                    f"{path}: field {name!r}: tag {tag} != expected "
                    f"{_INPUT_TAGS[kind]}"
                )
            if tag == 0:
                (n,) = _U32.unpack_from(blob, pos)
                pos += 4
                sample[name] = list(struct.unpack_from(f"<{n}I", blob, pos))
                pos += 4 * n
            elif tag == 1:
                (outer,) = _U32.unpack_from(blob, pos)
                pos += 4
                nested = []
                for _i in range(outer):
                    (n,) = _U32.unpack_from(blob, pos)
                    pos += 4
                    nested.append(list(struct.unpack_from(f"<{n}I", blob, pos)))
                    pos += 4 * n
                sample[name] = nested
            elif tag == 2:
                (size,) = _U32.unpack_from(blob, pos)
                pos += 4
                nbytes = (size + 7) // 8
                sample[name] = (size, blob[pos : pos + nbytes])
                pos += nbytes
            else:
                (n,) = _U32.unpack_from(blob, pos)
                pos += 4
                sample[name] = blob[pos : pos + n]
                pos += n
        for name, kind in output_schema.items():
            tag = blob[pos]
            pos += 1
            if tag != _OUTPUT_TAGS[kind]:
                raise FacadeError(
                    f"{path}: field {name!r}: tag {tag} != expected "
                    f"{_OUTPUT_TAGS[kind]}"
                )
            if tag == 0:
                sample[name] = blob[pos]
                pos += 1
            elif tag == 1:
                (sample[name],) = _U32.unpack_from(blob, pos)
                pos += 4
            elif tag == 2:
                (size,) = _U32.unpack_from(blob, pos)
                pos += 4
                nbytes = (size + 7) // 8
                sample[name] = (size, blob[pos : pos + nbytes])
                pos += nbytes
            else:
                (sample[name],) = _F64.unpack_from(blob, pos)
                pos += 8
        yield sample


class SampleStream:
    """Iterates decoded samples of one sample set, in shard order."""

    def __init__(self, samples_dir: str):
        self.samples_dir = samples_dir
        manifest_path = os.path.join(samples_dir, "samples.json")
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                self.manifest = json.load(f)
        except OSError as exc:
            raise FacadeError(f"cannot read {manifest_path}: {exc}") from exc
        self.total_samples = int(self.manifest["total_samples"])

    @property
    def input_schema(self) -> dict:
        return self.manifest["input_schema"]

    @property
    def output_schema(self) -> dict:
        return self.manifest["output_schema"]

    def processor_state(self, field: str) -> dict:
        path = os.path.join(self.samples_dir, f"procstate.{field}.json")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def __len__(self) -> int:
        return self.total_samples

    def __iter__(self) -> Iterator[dict]:
        for shard in self.manifest["shards"]:
            yield from _decode_shard(
                os.path.join(self.samples_dir, shard["path"]),
                self.input_schema,
                self.output_schema,
            )


class FacadeDataset:
    """Handle to an existing event cache; read/apply only."""

    def __init__(self, cache_dir: str, manifest: dict):
        self.cache_dir = cache_dir
        self.manifest = manifest

    @property
    def total_patients(self) -> int:
        return int(self.manifest["total_patients"])

    @property
    def total_events(self) -> int:
        return int(self.manifest["total_events"])

    def set_task(
        self,
        task_name: str,
        workers: int = 1,
        out_dir: Optional[str] = None,
    ) -> SampleStream:
        """Run (or reuse) a task over the cache and stream its samples."""
        if out_dir is None:
            out_dir = os.path.join(
                os.path.dirname(os.path.abspath(self.cache_dir)) or ".",
                f"samples-{task_name}",
            )
        _run_ehr(
            [
                "task",
                "--cache",
                self.cache_dir,
                "--task",
                task_name,
                "--workers",
                str(workers),
                "--out",
                out_dir,
            ]
        )
        return SampleStream(out_dir)

    def get_events(self, patient_id: str) -> list[dict]:
        """One patient's events, in canonical order, as plain dicts."""
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, "events.json")
            _run_ehr(
                [
                    "patient",
                    "--cache",
                    self.cache_dir,
                    "--id",
                    patient_id,
                    "--out",
                    out,
                ]
            )
            with open(out, "r", encoding="utf-8") as f:
                return json.load(f)


def load(cache_dir: str) -> FacadeDataset:
    """Open an existing cache; raises if its manifest is absent."""
    manifest_path = os.path.join(cache_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FacadeError(f"no cache manifest at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FacadeError(f"cannot read {manifest_path}: {exc}") from exc
    return FacadeDataset(cache_dir, manifest)
