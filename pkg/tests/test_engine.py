import json
import os

import pytest

import reference
from ehrstream.engine import (
    SampleSetManifest,
    iter_samples,
    load_sample_manifest,
    load_states,
    set_task,
)
from ehrstream.errors import IoError, SchemaError, TaskError
from ehrstream.store import open_store
from ehrstream.tasks import RawSample, TaskDefinition, get_builtin_task


def run_task(cache, task, out_dir, workers=1, **kw):
    with open_store(cache) as store:
        return set_task(store, task, workers=workers, out_dir=str(out_dir), **kw)


class TestSetTaskAgainstReference:
    @pytest.mark.parametrize("task_name", ["mortality", "drug_rec", "los"])
    def test_sample_bytes_match_reference(
        self, task_name, synth_small, synth_small_cache, tmp_path
    ):
        task = get_builtin_task(task_name)
        manifest = run_task(synth_small_cache, task, tmp_path / task_name)
        expected = reference.expected_sample_bytes(synth_small, task_name)
        got = reference.read_sample_record_bytes(str(tmp_path / task_name))
        assert got == expected
        want_count = len(reference.all_task_samples(synth_small, task_name))
        assert manifest.total_samples == want_count

    def test_sample_conservation(self, synth_small, synth_small_cache, tmp_path):
        task = get_builtin_task("los")
        manifest = run_task(synth_small_cache, task, tmp_path / "los")
        oracle = reference.all_task_samples(synth_small, "los")
        assert manifest.total_samples == len(oracle)
        assert sum(s.sample_count for s in manifest.shards) == len(oracle)


class TestWorkerInvariance:
    @pytest.mark.parametrize("task_name", ["mortality", "drug_rec"])
    def test_bytes_identical_across_worker_counts(
        self, task_name, synth_small_cache, tmp_path
    ):
        task = get_builtin_task(task_name)
        blobs = {}
        for workers in (1, 2, 4):
            out = tmp_path / f"w{workers}"
            run_task(
                synth_small_cache, task, out, workers=workers, batches_per_range=1,
                batch_size=16,
            )
            manifest_bytes = (out / "samples.json").read_bytes()
            shard_bytes = reference.read_sample_record_bytes(str(out))
            states = {
                name: (out / f"procstate.{name}.json").read_bytes()
                for name in list(task.input_schema) + list(task.output_schema)
            }
            blobs[workers] = (manifest_bytes, shard_bytes, states)
        assert blobs[1] == blobs[2] == blobs[4]


class TestSetTaskBehavior:
    def test_cache_hit_on_rerun(self, synth_small_cache, tmp_path):
        task = get_builtin_task("mortality")
        out = tmp_path / "samples"
        first = run_task(synth_small_cache, task, out)
        assert not first.cache_hit
        mtimes = {
            p: os.path.getmtime(os.path.join(out, p))
            for p in os.listdir(out)
            if p.endswith(".json")
        }
        second = run_task(synth_small_cache, task, out)
        assert second.cache_hit
        assert second.total_samples == first.total_samples
        for p, t in mtimes.items():
            assert os.path.getmtime(os.path.join(out, p)) == t

    def test_different_task_same_dir_rejected(self, synth_small_cache, tmp_path):
        out = tmp_path / "samples"
        run_task(synth_small_cache, get_builtin_task("mortality"), out)
        with pytest.raises(IoError, match="different task"):
            run_task(synth_small_cache, get_builtin_task("los"), out)

    def test_empty_apply_yields_empty_manifest(self, synth_small_cache, tmp_path):
        task = TaskDefinition(
            task_name="noop",
            input_schema={"x": "sequence"},
            output_schema={"y": "binary"},
            apply=lambda p: [],
        )
        manifest = run_task(synth_small_cache, task, tmp_path / "noop")
        assert manifest.total_samples == 0
        assert manifest.shards == ()

    def test_apply_error_names_patient_and_leaves_no_manifest(
        self, synth_small_cache, tmp_path
    ):
        def explode(p):
            if p.patient_id.endswith("7"):
                raise RuntimeError("boom")
            return []

        task = TaskDefinition(
            task_name="explode",
            input_schema={"x": "sequence"},
            output_schema={"y": "binary"},
            apply=explode,
        )
        out = tmp_path / "explode"
        with pytest.raises(TaskError, match="P0000000[7]"):
            run_task(synth_small_cache, task, out)
        assert not (out / "samples.json").exists()

    def test_schema_violation_detected(self, synth_small_cache, tmp_path):
        task = TaskDefinition(
            task_name="bad_schema",
            input_schema={"x": "sequence"},
            output_schema={"y": "binary"},
            apply=lambda p: [RawSample(patient_id=p.patient_id, values={"x": []})],
        )
        with pytest.raises(SchemaError, match="missing"):
            run_task(synth_small_cache, task, tmp_path / "bad")

    def test_skip_statistic_recorded(self, synth_small_cache, tmp_path):
        task = get_builtin_task("mortality")
        manifest = run_task(synth_small_cache, task, tmp_path / "m")
        doc = json.loads((tmp_path / "m" / "samples.json").read_text())
        assert doc["skipped"] == manifest.skipped
        assert manifest.skipped >= 0


class TestRawAndRegressionKinds:
    def test_full_tag_coverage_round_trip(self, synth_small_cache, tmp_path):
        def apply(p):
            n = p.num_events
            return [
                RawSample(
                    patient_id=p.patient_id,
                    values={
                        "codes": [e.event_type for e in p.events[:3]],
                        "flags": {e.event_type for e in p.events},
                        "blob": p.patient_id.encode("utf-8"),
                        "target": float(n),
                        "cls": "even" if n % 2 == 0 else "odd",
                    },
                )
            ]

        task = TaskDefinition(
            task_name="kinds",
            input_schema={
                "codes": "sequence",
                "flags": "multi_hot",
                "blob": "raw",
            },
            output_schema={"target": "regression", "cls": "multiclass"},
            apply=apply,
        )
        out = tmp_path / "kinds"
        manifest = run_task(synth_small_cache, task, out)
        assert manifest.total_samples == 120
        decoded = list(iter_samples(str(out), manifest))
        states = load_states(str(out), manifest)
        assert len(decoded) == 120
        first = decoded[0]
        assert first["blob"] == first["patient_id"].encode("utf-8")
        with open_store(synth_small_cache) as store:
            expected_n = len(store.get_events(first["patient_id"]))
        assert first["target"] == float(expected_n)
        size, bits = first["flags"]
        assert size == states["flags"].size
        assert manifest.label_stats["target"]["min"] >= 1.0
        assert set(manifest.label_stats["cls"]) <= {"even", "odd"}

    def test_manifest_round_trip(self, synth_small_cache, tmp_path):
        task = get_builtin_task("los")
        out = tmp_path / "los"
        manifest = run_task(synth_small_cache, task, out)
        loaded = load_sample_manifest(str(out))
        assert loaded == SampleSetManifest(
            task_name=manifest.task_name,
            source_cache_digest=manifest.source_cache_digest,
            shards=manifest.shards,
            processor_state_digests=manifest.processor_state_digests,
            total_samples=manifest.total_samples,
            label_stats=manifest.label_stats,
            input_schema=manifest.input_schema,
            output_schema=manifest.output_schema,
            skipped=manifest.skipped,
        )

    def test_decode_via_loaded_manifest_preserves_field_order(
        self, synth_small_cache, tmp_path
    ):
        # schema order in samples.json must match the shard byte layout,
        # including fields whose names do not sort alphabetically
        task = get_builtin_task("drug_rec")
        out = tmp_path / "dr"
        in_memory = run_task(synth_small_cache, task, out)
        loaded = load_sample_manifest(str(out))
        assert list(loaded.input_schema) == list(task.input_schema)
        assert list(iter_samples(str(out), loaded)) == list(
            iter_samples(str(out), in_memory)
        )

    def test_los_label_space_has_ten_classes(self, synth_small_cache, tmp_path):
        task = get_builtin_task("los")
        out = tmp_path / "los"
        manifest = run_task(synth_small_cache, task, out)
        states = load_states(str(out), manifest)
        assert states["label"].labels == tuple(str(i) for i in range(10))
