import json
import os
import subprocess
import sys
import textwrap

import pytest

import ehrfacade
from ehrfacade import FacadeError


def run_cli(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "ehrstream.cli", *args],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


@pytest.fixture(scope="session")
def fixture_cache(tmp_path_factory):
    """A small synthetic cache built entirely through the CLI."""
    root = tmp_path_factory.mktemp("facade-data")
    data = root / "data"
    cache = root / "cache"
    run_cli("synth", "--out", str(data), "--patients", "150", "--seed", "77")
    run_cli(
        "ingest",
        "--config",
        str(data / "dataset.yaml"),
        "--out",
        str(cache),
        "--workers",
        "2",
    )
    return str(cache)


def snapshot_tree(root):
    out = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            out[path] = (os.path.getmtime(path), os.path.getsize(path))
    return out


class TestLoad:
    def test_load_reads_manifest(self, fixture_cache):
        ds = ehrfacade.load(fixture_cache)
        assert ds.total_patients == 150
        assert ds.total_events > 0

    def test_missing_cache_names_manifest_path(self, tmp_path):
        with pytest.raises(FacadeError, match="manifest.json"):
            ehrfacade.load(str(tmp_path / "nope"))


class TestSevenLineWorkflow:
    def test_script_runs(self, fixture_cache, tmp_path):
        script = tmp_path / "workflow.py"
        # the whole workflow: import, load, set_task, iterate - 7 lines
        script.write_text(
            textwrap.dedent(
                f"""\
                import ehrfacade
                ds = ehrfacade.load({fixture_cache!r})
                samples = ds.set_task("mortality", workers=2, out_dir={str(tmp_path / "s")!r})
                for sample in samples:
                    print(sample["patient_id"], sample["label"])
                    break
                print("total:", len(samples))
                """
            )
        )
        assert len(script.read_text().splitlines()) == 7
        proc = subprocess.run(
            [sys.executable, str(script)], capture_output=True, text=True
        )
        assert proc.returncode == 0, proc.stderr
        assert "total:" in proc.stdout


class TestSampleStream:
    def test_stream_equals_native_shard_decode(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        out_dir = str(tmp_path / "samples")
        stream = ds.set_task("mortality", workers=2, out_dir=out_dir)
        facade_samples = list(stream)
        assert len(facade_samples) == stream.total_samples

        # oracle: the engine's own decoder, driven on the same shards
        from ehrstream.engine import iter_samples

        native = list(iter_samples(out_dir))
        assert facade_samples == native

    def test_stream_all_tasks(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        for task in ("drug_rec", "los"):
            stream = ds.set_task(task, out_dir=str(tmp_path / task))
            decoded = list(stream)
            assert len(decoded) == stream.total_samples
            from ehrstream.engine import iter_samples

            assert decoded == list(iter_samples(str(tmp_path / task)))

    def test_rerun_is_cache_hit(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        out_dir = str(tmp_path / "samples")
        first = list(ds.set_task("mortality", out_dir=out_dir))
        before = snapshot_tree(out_dir)
        second = list(ds.set_task("mortality", out_dir=out_dir))
        assert first == second
        assert snapshot_tree(out_dir) == before

    def test_processor_state_readable(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        stream = ds.set_task("mortality", out_dir=str(tmp_path / "s"))
        state = stream.processor_state("conditions")
        assert state["kind"] == "sequence"
        assert state["reserved"] == {"pad": 0, "unk": 1}
        assert state["tokens"] == sorted(state["tokens"])


class TestGetEvents:
    def test_events_in_canonical_order(self, fixture_cache):
        ds = ehrfacade.load(fixture_cache)
        events = ds.get_events("P00000003")
        assert events
        assert all(e["patient_id"] == "P00000003" for e in events)
        types = {e["event_type"] for e in events}
        assert "admissions" in types

    def test_unknown_patient_is_empty(self, fixture_cache):
        ds = ehrfacade.load(fixture_cache)
        assert ds.get_events("NOBODY") == []


class TestReadOnly:
    def test_facade_never_mutates_the_cache(self, fixture_cache, tmp_path):
        before = snapshot_tree(fixture_cache)
        ds = ehrfacade.load(fixture_cache)
        ds.get_events("P00000001")
        list(ds.set_task("mortality", out_dir=str(tmp_path / "s")))
        assert snapshot_tree(fixture_cache) == before


class TestErrorNames:
    def test_unknown_task_preserves_error_name(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        with pytest.raises(FacadeError) as exc:
            ds.set_task("nope", out_dir=str(tmp_path / "s"))
        assert exc.value.error_name == "ValidationError"

    def test_sample_manifest_fields(self, fixture_cache, tmp_path):
        ds = ehrfacade.load(fixture_cache)
        stream = ds.set_task("mortality", out_dir=str(tmp_path / "s"))
        manifest = stream.manifest
        assert manifest["task_name"] == "mortality"
        assert manifest["total_samples"] == sum(
            s["sample_count"] for s in manifest["shards"]
        )
        assert set(manifest["input_schema"]) == {
            "conditions",
            "procedures",
            "drugs",
        }
