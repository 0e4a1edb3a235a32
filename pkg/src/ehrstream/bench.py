"""Wall-time and peak-memory harness for the end-to-end pipeline.

Memory is sampled every 100 ms by a monitor thread summing proportional
set size (PSS) over the process tree, so fork-shared pages are not double
counted; RSS is the fallback where PSS is unavailable. Sampling can under
read short spikes, so the instrumented ingest buffer high-water mark is
reported alongside.
"""

from __future__ import annotations

import json
import os
import shutil
import threading
import time
from dataclasses import asdict, dataclass
from typing import Optional

import psutil

from .descriptor import parse_descriptor
from .engine import set_task
from .errors import IoError
from .ingest import IngestConfig, ingest, load_ingest_stats
from .store import open_store
from .tasks import get_builtin_task

SAMPLE_INTERVAL_S = 0.1


def _pss_of(proc: psutil.Process) -> int:
    path = f"/proc/{proc.pid}/smaps_rollup"
    try:
        with open(path, "rb") as f:
            for line in f:
                if line.startswith(b"Pss:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    try:
        return proc.memory_full_info().pss
    except (psutil.Error, AttributeError):
        return proc.memory_info().rss


def tree_memory_bytes() -> int:
    """Current memory of this process plus all its descendants."""
    me = psutil.Process()
    total = 0
    procs = [me]
    try:
        procs.extend(me.children(recursive=True))
    except psutil.Error:
        pass
    for p in procs:
        try:
            total += _pss_of(p)
        except psutil.Error:
            continue
    return total


class MemoryMonitor:
    """Samples process-tree memory on a timer; read-only observation."""

    def __init__(self, interval_s: float = SAMPLE_INTERVAL_S):
        self.interval_s = interval_s
        self.peak_bytes = 0
        self.samples = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _loop(self):
        while not self._stop.is_set():
            t0 = time.monotonic()
            current = tree_memory_bytes()
            if current > self.peak_bytes:
                self.peak_bytes = current
            self.samples += 1
            cost = time.monotonic() - t0
            # never let sampling dominate a core when PSS reads are slow
            self._stop.wait(max(self.interval_s, 2.0 * cost))

    def __enter__(self):
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        current = tree_memory_bytes()
        if current > self.peak_bytes:
            self.peak_bytes = current
        return False


@dataclass(frozen=True)
class BenchReport:
    ingest_s: float
    task_s: float
    total_s: float
    peak_rss_bytes: int
    workers: int
    total_events: int
    total_samples: int
    samples_per_second: float
    ingest_buffer_high_water: int
    cache_dir: str
    samples_dir: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def run_bench(
    descriptor_path: str,
    task_name: str,
    workers: int,
    mem_budget: int,
    work_dir: str,
    warm: bool = False,
    target_partition_events: Optional[int] = None,
) -> BenchReport:
    """Run ingest + task end to end, timing stages and sampling memory.

    Cold by default: both the event cache and the sample set are rebuilt.
    ``warm=True`` reuses an existing event cache (the task stage still
    runs fresh).
    """
    try:
        with open(descriptor_path, "r", encoding="utf-8") as f:
            descriptor = parse_descriptor(f.read())
    except OSError as exc:
        raise IoError(f"cannot read descriptor {descriptor_path}: {exc}") from exc
    base_dir = os.path.dirname(os.path.abspath(descriptor_path))
    cache_dir = os.path.join(work_dir, "cache")
    samples_dir = os.path.join(work_dir, f"samples-{task_name}-w{workers}")
    if not warm:
        shutil.rmtree(cache_dir, ignore_errors=True)
    shutil.rmtree(samples_dir, ignore_errors=True)
    os.makedirs(work_dir, exist_ok=True)

    task = get_builtin_task(task_name)
    cfg_kwargs = dict(
        out_dir=cache_dir, mem_budget_bytes=mem_budget, workers=workers
    )
    if target_partition_events is not None:
        cfg_kwargs["target_partition_events"] = target_partition_events
    cfg = IngestConfig(**cfg_kwargs)

    with MemoryMonitor() as monitor:
        t0 = time.monotonic()
        manifest = ingest(descriptor, cfg, base_dir=base_dir)
        t1 = time.monotonic()
        with open_store(cache_dir) as store:
            sample_manifest = set_task(
                store, task, workers=workers, out_dir=samples_dir
            )
        t2 = time.monotonic()

    ingest_s = t1 - t0
    task_s = t2 - t1
    stats = load_ingest_stats(cache_dir) if os.path.exists(
        os.path.join(cache_dir, "ingest_stats.json")
    ) else {}
    return BenchReport(
        ingest_s=ingest_s,
        task_s=task_s,
        total_s=t2 - t0,
        peak_rss_bytes=monitor.peak_bytes,
        workers=workers,
        total_events=manifest.total_events,
        total_samples=sample_manifest.total_samples,
        samples_per_second=(
            sample_manifest.total_samples / task_s if task_s > 0 else 0.0
        ),
        ingest_buffer_high_water=stats.get("buffer_high_water_bound", 0),
        cache_dir=cache_dir,
        samples_dir=samples_dir,
    )


_TABLE_ROWS = [
    ("ingest wall time (s)", "ingest_s", "{:.2f}"),
    ("task wall time (s)", "task_s", "{:.2f}"),
    ("total wall time (s)", "total_s", "{:.2f}"),
    ("peak memory (MiB)", "peak_rss_bytes", None),
    ("total events", "total_events", "{}"),
    ("total samples", "total_samples", "{}"),
    ("samples / second", "samples_per_second", "{:.0f}"),
]


def format_report_table(reports: list[BenchReport]) -> str:
    """Aligned metric-by-workers table for one or more runs."""
    headers = ["metric"] + [f"{r.workers} worker(s)" for r in reports]
    rows = []
    for label, attr, fmt in _TABLE_ROWS:
        row = [label]
        for r in reports:
            value = getattr(r, attr)
            if attr == "peak_rss_bytes":
                row.append(f"{value / (1024 * 1024):.1f}")
            else:
                row.append(fmt.format(value))
        rows.append(row)
    widths = [
        max(len(headers[i]), *(len(row[i]) for row in rows))
        for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)))
    return "\n".join(lines)
