"""Build a cache from raw CSVs and explore patients lazily.

Generates a small synthetic dataset, ingests it into the partitioned
event cache, then pulls single patients out without touching the rest.
"""

import os
import tempfile
from datetime import datetime

from ehrstream import EventFilter, IngestConfig, ingest, open_store, parse_descriptor
from ehrstream.store import iter_patient_batches
from ehrstream.synth import SynthConfig, generate


def main():
    work = tempfile.mkdtemp(prefix="demo-ingest-")
    print(f"working in {work}")

    # 1. synthesize a 500-patient dataset (patients, admissions, three code tables)
    descriptor_path = generate(SynthConfig(n_patients=500, seed=42), os.path.join(work, "data"))
    print(f"wrote {descriptor_path}")

    # 2. ingest: stream, join, externally sort, write patient-aligned partitions
    with open(descriptor_path, encoding="utf-8") as f:
        descriptor = parse_descriptor(f.read())
    cfg = IngestConfig(
        out_dir=os.path.join(work, "cache"),
        mem_budget_bytes=64 * 1024 * 1024,
        workers=2,
        target_partition_events=2000,
    )
    manifest = ingest(descriptor, cfg, base_dir=os.path.dirname(descriptor_path))
    print(
        f"cache: {manifest.total_events} events, {manifest.total_patients} patients, "
        f"{len(manifest.partitions)} partitions"
    )
    for p in manifest.partitions[:3]:
        print(f"  {p.path}: patients [{p.min_patient_id} .. {p.max_patient_id}]")

    # 3. open is instant (manifest only), lookups scan exactly one partition
    store = open_store(cfg.out_dir)
    print(f"open read {store.partition_bytes_read.total} partition bytes (lazy)")

    pid = "P00000007"
    events = store.get_events(pid)
    print(f"\n{pid} has {len(events)} events:")
    for e in events[:5]:
        print(f"  {e.timestamp}  {e.event_type:13s}  {dict(e.attributes)}")

    only_rx = store.get_events(pid, EventFilter(event_types=frozenset({"prescriptions"})))
    print(f"prescriptions only: {len(only_rx)} events")

    jan = EventFilter(time_range=(datetime(2019, 1, 1), datetime(2020, 1, 1)))
    print(f"events dated 2019: {len(store.get_events(pid, jan))}")

    # 4. deterministic iteration in consecutive batches of 128 patients
    sizes = [len(b.records) for b in iter_patient_batches(store, batch_size=128)]
    print(f"\nbatch sizes: {sizes}")
    store.close()


if __name__ == "__main__":
    # worker processes use the spawn start method, so the entry point
    # must be import-safe
    main()
