"""Single `ehr` command exposing the full pipeline.

Exit codes: 0 success, 1 runtime error, 2 usage error. Output data goes
to files; human-readable summaries go to stdout and diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .descriptor import parse_descriptor
from .engine import set_task
from .errors import EhrError
from .events import EventFilter
from .ingest import (
    DEFAULT_TARGET_PARTITION_EVENTS,
    IngestConfig,
    MIN_BUDGET_BYTES,
    ingest,
)
from .store import DEFAULT_BATCH_SIZE, open_store
from .tasks import get_builtin_task

# numpy- and psutil-backed modules (calib, synth, bench, medcode) are
# imported inside their handlers: spawned worker processes re-import this
# module and must stay lean

DEFAULT_ALPHA = 0.1
DEFAULT_BINS = 15
SYNTH_PROFILES = ("bench200k", "budget1m", "fixture1k")


def _default_workers() -> int:
    env = os.environ.get("EHR_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _add_workers_flag(p: argparse.ArgumentParser, multi: bool = False):
    if multi:
        p.add_argument(
            "--workers",
            default=str(_default_workers()),
            help="comma-separated worker counts (default from EHR_WORKERS or 1)",
        )
    else:
        p.add_argument(
            "--workers",
            type=int,
            default=_default_workers(),
            help="parallel workers (default from EHR_WORKERS or 1)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehr",
        description=(
            "Memory-bounded, deterministic event-stream processing for "
            "longitudinal clinical-style records."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build the partitioned event cache")
    p.add_argument("--config", required=True, help="dataset descriptor (.yaml)")
    p.add_argument("--out", required=True, help="cache output directory")
    p.add_argument("--mem-budget", type=int, default=4 * MIN_BUDGET_BYTES)
    p.add_argument(
        "--partition-events", type=int, default=DEFAULT_TARGET_PARTITION_EVENTS
    )
    _add_workers_flag(p)

    p = sub.add_parser("patient", help="print one patient's events")
    p.add_argument("--cache", required=True)
    p.add_argument("--id", required=True, dest="patient_id")
    p.add_argument("--tables", help="comma-separated event types to keep")
    p.add_argument("--out", help="also write the events as JSON to this file")

    p = sub.add_parser("task", help="apply a task and cache encoded samples")
    p.add_argument("--cache", required=True)
    p.add_argument("--task", required=True, dest="task_name")
    p.add_argument("--out", required=True, help="sample set output directory")
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    _add_workers_flag(p)

    p = sub.add_parser("medcode", help="ontology lookups and translation")
    med_sub = p.add_subparsers(dest="med_command", required=True)
    mp = med_sub.add_parser("lookup", help="code definition lookup")
    mp.add_argument("--ontology", required=True, help="code,name,parent CSV")
    mp.add_argument("--system", default="ontology")
    mp.add_argument("--code", required=True)
    mp = med_sub.add_parser("ancestors", help="transitive parents, nearest first")
    mp.add_argument("--ontology", required=True)
    mp.add_argument("--system", default="ontology")
    mp.add_argument("--code", required=True)
    mp = med_sub.add_parser("translate", help="cross-system code translation")
    mp.add_argument("--map", required=True, dest="map_file", help="source,target CSV")
    mp.add_argument("--source", default="source")
    mp.add_argument("--target", default="target")
    mp.add_argument("--code", required=True)

    p = sub.add_parser("calib", help="calibration and conformal prediction")
    cal_sub = p.add_subparsers(dest="calib_command", required=True)
    cp = cal_sub.add_parser("temperature", help="fit a scaling temperature")
    cp.add_argument(
        "--logits", required=True, help="p_0..p_{K-1},label CSV of raw scores"
    )
    cp.add_argument("--out", help="write the JSON report here")
    cp = cal_sub.add_parser("binning", help="histogram binning for binary probs")
    cp.add_argument("--calib", required=True, help="p_0,p_1,label CSV (binary)")
    cp.add_argument("--test", help="held-out CSV to evaluate on")
    cp.add_argument("--bins", type=int, default=DEFAULT_BINS)
    cp.add_argument("--out", help="write the JSON report here")
    cp = cal_sub.add_parser("conformal", help="split-conformal prediction sets")
    cp.add_argument("--calib", required=True, help="p_0..p_{K-1},label CSV")
    cp.add_argument("--test", required=True, help="held-out CSV to evaluate on")
    cp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    cp.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=SYNTH_PROFILES, help="named profile")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--death-rate", type=float, default=0.05)

    p = sub.add_parser("bench", help="time the pipeline and sample memory")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, dest="task_name")
    p.add_argument("--work", required=True, help="working directory for outputs")
    p.add_argument("--mem-budget", type=int, default=4 * MIN_BUDGET_BYTES)
    p.add_argument("--partition-events", type=int)
    p.add_argument("--warm", action="store_true", help="reuse an existing cache")
    p.add_argument("--out", help="write the JSON report(s) here")
    _add_workers_flag(p, multi=True)

    return parser


def _cmd_ingest(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        descriptor = parse_descriptor(f.read())
    cfg = IngestConfig(
        out_dir=args.out,
        mem_budget_bytes=args.mem_budget,
        workers=args.workers,
        target_partition_events=args.partition_events,
    )
    manifest = ingest(
        descriptor, cfg, base_dir=os.path.dirname(os.path.abspath(args.config))
    )
    print(
        f"cache {args.out}: {manifest.total_events} events, "
        f"{manifest.total_patients} patients, "
        f"{len(manifest.partitions)} partition(s)"
    )
    return 0


def _event_to_doc(e) -> dict:
    return {
        "patient_id": e.patient_id,
        "event_type": e.event_type,
        "timestamp": None if e.timestamp is None else e.timestamp.isoformat(sep=" "),
        "seq": e.seq,
        "attributes": dict(e.attributes),
    }


def _cmd_patient(args) -> int:
    flt = None
    if args.tables:
        flt = EventFilter(
            event_types=frozenset(t for t in args.tables.split(",") if t)
        )
    with open_store(args.cache) as store:
        events = store.get_events(args.patient_id, flt)
    for e in events:
        ts = "-" if e.timestamp is None else e.timestamp.isoformat(sep=" ")
        attrs = " ".join(f"{k}={v}" for k, v in e.attributes.items())
        print(f"{ts}  {e.event_type}  seq={e.seq}  {attrs}")
    print(f"{len(events)} event(s) for patient {args.patient_id}", file=sys.stderr)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump([_event_to_doc(e) for e in events], f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _cmd_task(args) -> int:
    task = get_builtin_task(args.task_name)
    with open_store(args.cache) as store:
        manifest = set_task(
            store,
            task,
            workers=args.workers,
            out_dir=args.out,
            batch_size=args.batch_size,
        )
    if manifest.cache_hit:
        print("cache hit")
    print(
        f"task {manifest.task_name}: {manifest.total_samples} samples in "
        f"{len(manifest.shards)} shard(s), {manifest.skipped} admission(s) skipped"
    )
    return 0


def _cmd_medcode(args) -> int:
    from . import medcode as medcode_mod

    if args.med_command == "lookup":
        graph = medcode_mod.load_ontology(args.system, args.ontology)
        name = medcode_mod.lookup(graph, args.code)
        if name is None:
            print(f"{args.code}: not found")
        else:
            print(f"{args.code}: {name}")
        return 0
    if args.med_command == "ancestors":
        graph = medcode_mod.load_ontology(args.system, args.ontology)
        for code in medcode_mod.ancestors(graph, args.code):
            print(code)
        return 0
    cross = medcode_mod.load_crossmap(args.source, args.target, args.map_file)
    for code in sorted(medcode_mod.translate(cross, args.code)):
        print(code)
    return 0


def _write_report(args, report: dict):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")


def _cmd_calib(args) -> int:
    import numpy as np

    from . import calib as calib_mod

    report = {
        "ece": None,
        "coverage": None,
        "avg_set_size": None,
        "T": None,
        "alpha": None,
        "t": None,
    }
    if args.calib_command == "temperature":
        logits, labels = calib_mod.read_prob_csv(args.logits)
        model = calib_mod.fit_temperature(logits, labels)
        probs = calib_mod.apply_temperature(model, logits)
        report["T"] = model.T
        report["ece"] = calib_mod.ece(probs, labels)
    elif args.calib_command == "binning":
        cal_probs, cal_labels = calib_mod.read_prob_csv(args.calib)
        if cal_probs.shape[1] != 2:
            raise EhrError("binning expects binary (two-column) probabilities")
        model = calib_mod.fit_histogram_binning(
            cal_probs[:, 1], cal_labels, bins=args.bins
        )
        eval_probs, eval_labels = (
            calib_mod.read_prob_csv(args.test)
            if args.test
            else (cal_probs, cal_labels)
        )
        q = calib_mod.apply_binning(model, eval_probs[:, 1])
        matrix = np.column_stack([1.0 - q, q])
        report["ece"] = calib_mod.ece(matrix, eval_labels)
    else:  # conformal
        cal_probs, cal_labels = calib_mod.read_prob_csv(args.calib)
        test_probs, test_labels = calib_mod.read_prob_csv(args.test)
        thr = calib_mod.fit_label_threshold(cal_probs, cal_labels, args.alpha)
        sets = calib_mod.predict_sets(thr, test_probs)
        report["alpha"] = thr.alpha
        report["t"] = thr.t
        report["coverage"] = calib_mod.coverage(sets, test_labels)
        report["avg_set_size"] = calib_mod.avg_set_size(sets)
        report["ece"] = calib_mod.ece(test_probs, test_labels)
    _write_report(args, report)
    return 0


def _cmd_synth(args) -> int:
    from .synth import PROFILES, SynthConfig, generate

    if args.profile:
        cfg = PROFILES[args.profile]
    else:
        cfg = SynthConfig(
            n_patients=args.patients, seed=args.seed, death_rate=args.death_rate
        )
    path = generate(cfg, args.out)
    print(path)
    return 0


def _cmd_bench(args) -> int:
    from .bench import BenchReport, format_report_table, run_bench

    worker_counts = []
    for part in str(args.workers).split(","):
        part = part.strip()
        if part:
            worker_counts.append(int(part))
    if not worker_counts:
        raise EhrError("no worker counts given")
    reports: list[BenchReport] = []
    for w in worker_counts:
        report = run_bench(
            args.config,
            args.task_name,
            workers=w,
            mem_budget=args.mem_budget,
            work_dir=args.work,
            warm=args.warm,
            target_partition_events=args.partition_events,
        )
        reports.append(report)
        print(f"workers={w}: done in {report.total_s:.2f}s", file=sys.stderr)
    print(format_report_table(reports))
    if args.out:
        doc = [json.loads(r.to_json()) for r in reports]
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


_HANDLERS = {
    "ingest": _cmd_ingest,
    "patient": _cmd_patient,
    "task": _cmd_task,
    "medcode": _cmd_medcode,
    "calib": _cmd_calib,
    "synth": _cmd_synth,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except EhrError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except SyntaxError as exc:
        print(f"error: SyntaxError: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
