import json
import os
import random

import pytest

import reference
from conftest import ingest_config
from ehrstream.descriptor import parse_descriptor
from ehrstream.errors import ManifestError
from ehrstream.events import EventFilter
from ehrstream.ingest import ingest
from ehrstream.store import iter_patient_batches, open_store


class TestOpenStore:
    def test_open_reads_only_manifest(self, mini_cache):
        with open_store(mini_cache) as store:
            assert store.total_patients == 2
            assert store.partition_bytes_read.total == 0
            assert store.manifest_bytes_read == os.path.getsize(
                os.path.join(mini_cache, "manifest.json")
            )

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            open_store(str(tmp_path))

    def test_overlapping_ranges_rejected(self, mini_cache, tmp_path):
        with open(os.path.join(mini_cache, "manifest.json"), encoding="utf-8") as f:
            doc = json.load(f)
        doc["partitions"] = doc["partitions"] * 2
        doc["total_events"] *= 2
        doc["total_patients"] *= 2
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="overlap"):
            open_store(str(bad))

    def test_empty_cache_iterates_nothing(self, tmp_path, mini_dataset):
        base = os.path.dirname(mini_dataset)
        for name in ("admissions.csv", "diagnoses.csv"):
            path = os.path.join(base, name)
            with open(path, encoding="utf-8") as f:
                header = f.readline()
            with open(path, "w", encoding="utf-8") as f:
                f.write(header)
        with open(mini_dataset, encoding="utf-8") as f:
            descriptor = parse_descriptor(f.read())
        cache = tmp_path / "cache"
        ingest(descriptor, ingest_config(cache), base_dir=base)
        with open_store(str(cache)) as store:
            assert store.total_patients == 0
            assert list(iter_patient_batches(store)) == []


class TestGetEvents:
    def test_known_patient_matches_linear_scan_oracle(self, mini_cache, mini_dataset):
        expected = [
            e for e in reference.sorted_events(mini_dataset) if e["pid"] == "P1"
        ]
        with open_store(mini_cache) as store:
            events = store.get_events("P1")
        assert [
            (e.event_type, e.seq, dict(e.attributes)) for e in events
        ] == [(e["etype"], e["seq"], dict(e["attrs"])) for e in expected]

    def test_unknown_patient_empty(self, mini_cache):
        with open_store(mini_cache) as store:
            assert store.get_events("NOBODY") == []

    def test_filter_preserves_order(self, mini_cache):
        with open_store(mini_cache) as store:
            full = store.get_events("P1")
            only_diag = store.get_events(
                "P1", EventFilter(event_types=frozenset({"diagnoses"}))
            )
        assert only_diag == [e for e in full if e.event_type == "diagnoses"]

    def test_every_patient_matches_oracle(self, synth_small, synth_small_cache):
        events = reference.sorted_events(synth_small)
        by_pid = {}
        for e in events:
            by_pid.setdefault(e["pid"], []).append(e)
        rng = random.Random(5)
        pids = rng.sample(sorted(by_pid), 25)
        with open_store(synth_small_cache) as store:
            for pid in pids:
                got = store.get_events(pid)
                want = by_pid[pid]
                assert [(e.event_type, e.seq) for e in got] == [
                    (e["etype"], e["seq"]) for e in want
                ], pid

    def test_scans_exactly_one_partition(self, synth_small, tmp_path):
        base = os.path.dirname(synth_small)
        with open(synth_small, encoding="utf-8") as f:
            descriptor = parse_descriptor(f.read())
        cache = tmp_path / "cache"
        ingest(
            descriptor,
            ingest_config(cache, target_partition_events=200),
            base_dir=base,
        )
        with open_store(str(cache)) as store:
            assert len(store.manifest.partitions) > 3
            biggest = max(p.event_count for p in store.manifest.partitions)
            store.get_events("P00000050")
            # at most one partition's payload (plus its footer) was read
            assert store.partition_bytes_read.total <= biggest * 200 + 4096


class TestPatientBatches:
    def test_batch_shapes(self, synth_small_cache):
        with open_store(synth_small_cache) as store:
            batches = list(iter_patient_batches(store, batch_size=50))
        assert [len(b.records) for b in batches] == [50, 50, 20]
        assert [b.batch_index for b in batches] == [0, 1, 2]
        for b in batches:
            ids = [r.patient_id for r in b.records]
            assert ids == sorted(ids)

    def test_single_patient_dataset(self, mini_cache):
        with open_store(mini_cache) as store:
            batches = list(iter_patient_batches(store, batch_size=1))
        assert [len(b.records) for b in batches] == [1, 1]

    def test_exhaustive_and_duplicate_free(self, synth_small, synth_small_cache):
        expected_pids = sorted(
            {e["pid"] for e in reference.sorted_events(synth_small)}
        )
        with open_store(synth_small_cache) as store:
            got = [
                r.patient_id
                for b in iter_patient_batches(store, batch_size=32)
                for r in b.records
            ]
        assert got == expected_pids

    def test_batch_memory_bound(self, synth_small_cache):
        batch_size = 16
        with open_store(synth_small_cache) as store:
            max_events = 0
            for batch in iter_patient_batches(store, batch_size=batch_size):
                per_patient = max(r.num_events for r in batch.records)
                max_events = max(max_events, batch_size * per_patient)
            assert store.batch_event_high_water <= max_events

    def test_iter_from_ordinal(self, synth_small_cache):
        with open_store(synth_small_cache) as store:
            all_pids = [
                r.patient_id
                for b in iter_patient_batches(store, batch_size=1000)
                for r in b.records
            ]
            from_40 = [r.patient_id for r in store.iter_patients_from(40)]
        assert from_40 == all_pids[40:]

    def test_events_sorted_within_record(self, synth_small_cache):
        from ehrstream.events import event_sort_key

        with open_store(synth_small_cache) as store:
            for batch in iter_patient_batches(store, batch_size=64):
                for record in batch.records:
                    keys = [event_sort_key(e) for e in record.events]
                    assert keys == sorted(keys)
