"""Stages 2 and 3: parallel task transformation and processor encoding.

Work is split into fixed ranges of consecutive patient batches; the range
layout depends only on the dataset, never on the worker count, and each
range maps to at most one output shard. Workers take contiguous blocks of
ranges so every worker makes a single forward pass over the partitions it
touches. Outputs are therefore byte-identical for any worker count.

Phase A applies the task per patient and spills raw samples plus partial
vocabulary counts. Phase B merges counts into global fitted states. Phase
C encodes each range's raw samples into its shard.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import shards as shards_mod
from .errors import IoError, SchemaError, TaskError, ValidationError
from .frames import iter_frames, write_frame
from .parallel import run_jobs
from .processors import (
    LabelSpace,
    fit_label_space,
    fit_vocab,
    procstate_from_json,
    procstate_to_json,
)
from .store import DEFAULT_BATCH_SIZE, Store, open_store
from .tasks import TaskDefinition, take_skip_count

SAMPLES_MANIFEST_NAME = "samples.json"
SHARD_DIR = "shards"
BATCHES_PER_RANGE = 8

_VOCAB_KINDS = {"sequence", "nested_sequence", "multi_hot"}


@dataclass(frozen=True)
class ShardInfo:
    path: str
    sample_count: int


@dataclass(frozen=True)
class SampleSetManifest:
    task_name: str
    source_cache_digest: str
    shards: tuple[ShardInfo, ...]
    processor_state_digests: dict[str, str]
    total_samples: int
    label_stats: dict[str, dict]
    input_schema: dict[str, str]
    output_schema: dict[str, str]
    skipped: int = 0
    cache_hit: bool = field(default=False, compare=False)


def manifest_to_json_doc(m: SampleSetManifest) -> dict:
    return {
        "task_name": m.task_name,
        "source_cache_digest": m.source_cache_digest,
        "shards": [{"path": s.path, "sample_count": s.sample_count} for s in m.shards],
        "processor_state_digests": dict(m.processor_state_digests),
        "total_samples": m.total_samples,
        "label_stats": m.label_stats,
        "input_schema": dict(m.input_schema),
        "output_schema": dict(m.output_schema),
        "skipped": m.skipped,
    }


def load_sample_manifest(out_dir: str) -> SampleSetManifest:
    path = os.path.join(out_dir, SAMPLES_MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read sample manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{path}: not valid JSON: {exc}") from exc
    return SampleSetManifest(
        task_name=doc["task_name"],
        source_cache_digest=doc["source_cache_digest"],
        shards=tuple(
            ShardInfo(path=s["path"], sample_count=int(s["sample_count"]))
            for s in doc["shards"]
        ),
        processor_state_digests=doc["processor_state_digests"],
        total_samples=int(doc["total_samples"]),
        label_stats=doc["label_stats"],
        input_schema=doc["input_schema"],
        output_schema=doc["output_schema"],
        skipped=int(doc.get("skipped", 0)),
    )


def _ranges_for_worker(n_ranges: int, workers: int, w: int) -> list[int]:
    per = -(-n_ranges // workers)
    return list(range(w * per, min((w + 1) * per, n_ranges)))


def _task_from_ctx(ctx: dict) -> TaskDefinition:
    # built-in tasks travel by registry name so spawned workers can rebuild
    # them; custom tasks ride along in-memory (fork workers only)
    if "task_ref" in ctx:
        from .tasks import get_builtin_task

        return get_builtin_task(ctx["task_ref"])
    return ctx["task"]


def _phase_a_worker(args) -> dict:
    ctx, range_indices = args
    task = _task_from_ctx(ctx)
    ppr: int = ctx["patients_per_range"]
    total: int = ctx["total_patients"]
    tmp_dir: str = ctx["tmp_dir"]
    store = open_store(ctx["store_root"])
    input_schema = task.input_schema
    output_schema = task.output_schema
    expected_fields = set(input_schema) | set(output_schema)

    vocab_counts: dict[str, Counter] = {
        f: Counter() for f, k in input_schema.items() if k in _VOCAB_KINDS
    }
    label_counts: dict[str, Counter] = {
        f: Counter() for f, k in output_schema.items() if k != "regression"
    }
    reg_ranges: dict[str, list] = {
        f: [None, None] for f, k in output_schema.items() if k == "regression"
    }
    skipped = 0
    ranges_out = []
    take_skip_count()  # reset any stale count in this process

    # the assigned ranges are contiguous, so one forward pass through the
    # partitions covers them all; range files rotate at batch boundaries
    start_ord = range_indices[0] * ppr if range_indices else total
    end_ord = min(total, (range_indices[-1] + 1) * ppr) if range_indices else total

    current_r = -1
    raw_file = None
    n_samples = 0

    def close_range():
        nonlocal raw_file, n_samples
        if raw_file is not None:
            raw_file.close()
            ranges_out.append(
                (
                    current_r,
                    os.path.join(tmp_dir, f"range-{current_r:05d}.raw"),
                    n_samples,
                )
            )
            raw_file = None
            n_samples = 0

    try:
        with store:
            patients = store.iter_patients_from(start_ord)
            for ordinal in range(start_ord, end_ord):
                record = next(patients)
                r = ordinal // ppr
                if r != current_r:
                    close_range()
                    current_r = r
                    raw_file = open(
                        os.path.join(tmp_dir, f"range-{r:05d}.raw"),
                        "wb",
                        buffering=1 << 18,
                    )
                try:
                    samples = task.apply(record)
                except Exception as exc:
                    return {"error": ("task", record.patient_id, repr(exc))}
                skipped += take_skip_count()
                for s in samples:
                    got = set(s.values)
                    if got != expected_fields:
                        missing = sorted(expected_fields - got)
                        extra = sorted(got - expected_fields)
                        return {
                            "error": (
                                "schema",
                                record.patient_id,
                                f"sample fields missing={missing} "
                                f"unexpected={extra}",
                            )
                        }
                    for f_name, counter in vocab_counts.items():
                        kind = input_schema[f_name]
                        v = s.values[f_name]
                        if kind == "nested_sequence":
                            for inner in v:
                                counter.update(inner)
                        else:
                            counter.update(v)
                    for f_name, counter in label_counts.items():
                        kind = output_schema[f_name]
                        v = s.values[f_name]
                        if kind == "binary":
                            counter["1" if v in (1, "1", True) else "0"] += 1
                        elif kind == "multiclass":
                            counter[str(v)] += 1
                        else:  # multilabel
                            counter.update(str(x) for x in v)
                    for f_name, bounds in reg_ranges.items():
                        v = float(s.values[f_name])
                        if bounds[0] is None or v < bounds[0]:
                            bounds[0] = v
                        if bounds[1] is None or v > bounds[1]:
                            bounds[1] = v
                    write_frame(raw_file, (s.patient_id, s.values))
                    n_samples += 1
            close_range()
    except Exception as exc:
        return {"error": ("internal", "", repr(exc))}
    finally:
        if raw_file is not None:
            raw_file.close()
    return {
        "ranges": ranges_out,
        "vocab_counts": vocab_counts,
        "label_counts": label_counts,
        "reg_ranges": reg_ranges,
        "skipped": skipped,
    }


def _phase_c_worker(args) -> dict:
    ctx, items = args
    input_schema = ctx["input_schema"]
    output_schema = ctx["output_schema"]
    states = ctx["states"]
    out_dir = ctx["out_dir"]
    stats: dict = {}
    results = []
    try:
        for r, raw_path, n_samples in items:
            if n_samples == 0:
                continue
            rel = os.path.join(SHARD_DIR, f"shard-{r:05d}.smp")
            writer = shards_mod.ShardWriter(os.path.join(out_dir, rel))
            with open(raw_path, "rb", buffering=1 << 18) as f:
                for patient_id, values in iter_frames(f):
                    writer.add(
                        shards_mod.encode_sample(
                            patient_id,
                            values,
                            input_schema,
                            output_schema,
                            states,
                            stats,
                        )
                    )
            writer.close()
            results.append((r, rel, n_samples))
    except Exception as exc:
        return {"error": ("internal", "", repr(exc))}
    return {"shards": results, "stats": stats}


def set_task(
    store: Store,
    task: TaskDefinition,
    workers: int = 1,
    out_dir: str = "samples",
    batch_size: int = DEFAULT_BATCH_SIZE,
    batches_per_range: int = BATCHES_PER_RANGE,
) -> SampleSetManifest:
    """Apply a task to every patient and write encoded sample shards.

    Re-running against an existing sample set built from the same cache
    and task is a no-op (``cache_hit`` is set on the returned manifest).
    """
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    manifest_path = os.path.join(out_dir, SAMPLES_MANIFEST_NAME)
    if os.path.exists(manifest_path):
        existing = load_sample_manifest(out_dir)
        if (
            existing.task_name == task.task_name
            and existing.source_cache_digest == store.cache_digest
            and existing.input_schema == dict(task.input_schema)
            and existing.output_schema == dict(task.output_schema)
        ):
            return SampleSetManifest(
                task_name=existing.task_name,
                source_cache_digest=existing.source_cache_digest,
                shards=existing.shards,
                processor_state_digests=existing.processor_state_digests,
                total_samples=existing.total_samples,
                label_stats=existing.label_stats,
                input_schema=existing.input_schema,
                output_schema=existing.output_schema,
                skipped=existing.skipped,
                cache_hit=True,
            )
        raise IoError(
            f"out_dir {out_dir} holds samples for a different task or cache"
        )
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        raise IoError(f"out_dir {out_dir} is not empty and holds no sample set")

    os.makedirs(out_dir, exist_ok=True)
    tmp_dir = os.path.join(out_dir, "tmp-task")
    os.makedirs(tmp_dir, exist_ok=True)
    try:
        total_patients = store.total_patients
        ppr = batch_size * batches_per_range
        n_ranges = max(0, -(-total_patients // ppr))

        # spawned workers stay lean but need a picklable task; built-ins
        # travel by name, custom apply functions force fork workers
        method = "spawn" if task.registry_name is not None else "fork"
        ctx_a = {
            "patients_per_range": ppr,
            "total_patients": total_patients,
            "tmp_dir": tmp_dir,
            "store_root": store.root,
        }
        if task.registry_name is not None:
            ctx_a["task_ref"] = task.registry_name
        else:
            ctx_a["task"] = task
        jobs = [
            (ctx_a, ranges)
            for w in range(workers)
            if (ranges := _ranges_for_worker(n_ranges, workers, w))
        ]
        results = run_jobs(_phase_a_worker, jobs, workers, tmp_dir, method)
        for res in results:
            if "error" in res:
                kind, pid, msg = res["error"]
                if kind == "schema":
                    raise SchemaError(f"patient {pid!r}: {msg}")
                raise TaskError(pid, msg)

        all_ranges: list[tuple[int, str, int]] = []
        skipped = 0
        for res in results:
            all_ranges.extend(res["ranges"])
            skipped += res["skipped"]
        all_ranges.sort(key=lambda t: t[0])

        # phase B: deterministic global fits
        states: dict[str, object] = {}
        for f_name, kind in task.input_schema.items():
            if kind in _VOCAB_KINDS:
                states[f_name] = fit_vocab(
                    [res["vocab_counts"][f_name] for res in results]
                )
            else:
                states[f_name] = None
        label_stats: dict[str, dict] = {}
        for f_name, kind in task.output_schema.items():
            if kind in ("multiclass", "multilabel"):
                fixed = task.fixed_label_spaces.get(f_name)
                if fixed is not None:
                    states[f_name] = LabelSpace(labels=tuple(sorted(fixed)))
                else:
                    states[f_name] = fit_label_space(
                        [res["label_counts"][f_name] for res in results]
                    )
            else:
                states[f_name] = None
            if kind == "regression":
                lo = min(
                    (res["reg_ranges"][f_name][0] for res in results
                     if res["reg_ranges"][f_name][0] is not None),
                    default=None,
                )
                hi = max(
                    (res["reg_ranges"][f_name][1] for res in results
                     if res["reg_ranges"][f_name][1] is not None),
                    default=None,
                )
                label_stats[f_name] = {"min": lo, "max": hi}
            else:
                merged: Counter = Counter()
                for res in results:
                    merged.update(res["label_counts"][f_name])
                label_stats[f_name] = {k: merged[k] for k in sorted(merged)}

        digests: dict[str, str] = {}
        for f_name in task.all_fields:
            kind = task.input_schema.get(f_name) or task.output_schema[f_name]
            text = procstate_to_json(kind, states[f_name])
            state_path = os.path.join(out_dir, f"procstate.{f_name}.json")
            with open(state_path, "w", encoding="utf-8") as f:
                f.write(text)
            digests[f_name] = hashlib.sha256(text.encode("utf-8")).hexdigest()

        # phase C: encode ranges into shards
        os.makedirs(os.path.join(out_dir, SHARD_DIR), exist_ok=True)
        ctx_c = {
            "input_schema": dict(task.input_schema),
            "output_schema": dict(task.output_schema),
            "states": states,
            "out_dir": out_dir,
        }
        per = -(-len(all_ranges) // workers) if all_ranges else 0
        c_jobs = [
            (ctx_c, chunk)
            for w in range(workers)
            if per and (chunk := all_ranges[w * per : (w + 1) * per])
        ]
        c_results = run_jobs(_phase_c_worker, c_jobs, workers, tmp_dir, method)
        shard_infos: list[tuple[int, ShardInfo]] = []
        dropped = 0
        for res in c_results:
            if "error" in res:
                raise TaskError("", res["error"][2])
            for r, rel, n in res["shards"]:
                shard_infos.append((r, ShardInfo(path=rel, sample_count=n)))
            dropped += res["stats"].get("dropped_unknown_labels", 0)
        shard_infos.sort(key=lambda t: t[0])

        total_samples = sum(s.sample_count for _, s in shard_infos)
        manifest = SampleSetManifest(
            task_name=task.task_name,
            source_cache_digest=store.cache_digest,
            shards=tuple(s for _, s in shard_infos),
            processor_state_digests=digests,
            total_samples=total_samples,
            label_stats=label_stats,
            input_schema=dict(task.input_schema),
            output_schema=dict(task.output_schema),
            skipped=skipped,
        )
        doc = manifest_to_json_doc(manifest)
        if dropped:
            doc["dropped_unknown_labels"] = dropped
        tmp_manifest = manifest_path + ".tmp"
        with open(tmp_manifest, "w", encoding="utf-8") as f:
            # never sort_keys here: schema field order IS the shard layout
            f.write(json.dumps(doc, indent=2) + "\n")
        os.replace(tmp_manifest, manifest_path)
        return manifest
    except Exception:
        shutil.rmtree(os.path.join(out_dir, SHARD_DIR), ignore_errors=True)
        for name in os.listdir(out_dir) if os.path.isdir(out_dir) else []:
            if name.startswith("procstate."):
                os.unlink(os.path.join(out_dir, name))
        raise
    finally:
        shutil.rmtree(tmp_dir, ignore_errors=True)


def load_states(out_dir: str, manifest: SampleSetManifest) -> dict[str, object]:
    states: dict[str, object] = {}
    for f_name in list(manifest.input_schema) + list(manifest.output_schema):
        path = os.path.join(out_dir, f"procstate.{f_name}.json")
        with open(path, "r", encoding="utf-8") as f:
            _, state = procstate_from_json(f.read())
        states[f_name] = state
    return states


def iter_samples(out_dir: str, manifest: Optional[SampleSetManifest] = None):
    """Decode every shard in manifest order."""
    if manifest is None:
        manifest = load_sample_manifest(out_dir)
    for info in manifest.shards:
        yield from shards_mod.read_shard(
            os.path.join(out_dir, info.path),
            manifest.input_schema,
            manifest.output_schema,
        )
