import json
import os

import reference
from ehrstream.bench import (
    MemoryMonitor,
    format_report_table,
    run_bench,
    tree_memory_bytes,
)
from ehrstream.synth import SynthConfig, generate


class TestMemoryMonitor:
    def test_tree_memory_positive(self):
        assert tree_memory_bytes() > 10 * 1024 * 1024

    def test_monitor_captures_peak(self):
        with MemoryMonitor(interval_s=0.01) as mon:
            blob = bytearray(64 * 1024 * 1024)
            blob[::4096] = b"x" * len(blob[::4096])
        del blob
        assert mon.peak_bytes > 0
        assert mon.samples >= 1


class TestRunBench:
    def test_fixture_report(self, tmp_path):
        descriptor = generate(
            SynthConfig(n_patients=40, seed=50), str(tmp_path / "data")
        )
        report = run_bench(
            descriptor,
            "mortality",
            workers=1,
            mem_budget=64 * 1024 * 1024,
            work_dir=str(tmp_path / "work"),
        )
        oracle_count = len(reference.all_task_samples(descriptor, "mortality"))
        assert report.total_samples == oracle_count
        assert report.total_events > 0
        assert report.ingest_s >= 0 and report.task_s >= 0
        assert report.total_s >= report.ingest_s + report.task_s - 0.05
        assert report.peak_rss_bytes > 0
        assert report.workers == 1

    def test_warm_reuses_cache(self, tmp_path):
        descriptor = generate(
            SynthConfig(n_patients=40, seed=51), str(tmp_path / "data")
        )
        work = str(tmp_path / "work")
        first = run_bench(
            descriptor, "mortality", 1, 64 * 1024 * 1024, work
        )
        manifest_path = os.path.join(first.cache_dir, "manifest.json")
        mtime = os.path.getmtime(manifest_path)
        second = run_bench(
            descriptor, "mortality", 1, 64 * 1024 * 1024, work, warm=True
        )
        assert os.path.getmtime(manifest_path) == mtime
        assert second.total_samples == first.total_samples

    def test_report_json_and_table(self, tmp_path):
        descriptor = generate(
            SynthConfig(n_patients=30, seed=52), str(tmp_path / "data")
        )
        report = run_bench(
            descriptor, "los", 1, 64 * 1024 * 1024, str(tmp_path / "work")
        )
        doc = json.loads(report.to_json())
        assert doc["total_samples"] == report.total_samples
        table = format_report_table([report])
        assert "task wall time (s)" in table
        assert "1 worker(s)" in table
