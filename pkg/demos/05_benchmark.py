"""Time the raw-CSV-to-samples pipeline and sample its memory.

Runs the end-to-end benchmark at two worker counts and prints the
aligned comparison table.
"""

import os
import tempfile

from ehrstream.bench import format_report_table, run_bench
from ehrstream.synth import SynthConfig, generate


def main():
    work = tempfile.mkdtemp(prefix="demo-bench-")
    descriptor_path = generate(
        SynthConfig(n_patients=20_000, seed=3), os.path.join(work, "data")
    )
    print(f"dataset: {descriptor_path}")

    reports = []
    for workers in (1, 2):
        report = run_bench(
            descriptor_path,
            "mortality",
            workers=workers,
            mem_budget=128 * 1024 * 1024,
            work_dir=os.path.join(work, "bench"),
            warm=workers != 1,  # first run pays the ingest, later runs reuse it
        )
        reports.append(report)

    print()
    print(format_report_table(reports))
    print(f"\nreports and caches under {work}")


if __name__ == "__main__":
    # worker processes use the spawn start method, so the entry point
    # must be import-safe
    main()
