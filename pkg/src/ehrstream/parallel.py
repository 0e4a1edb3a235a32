"""Minimal multi-process job runner used by ingest and the task engine.

Workers are plain processes (no pool machinery) and hand results back
through framed pickle files. The default start method is ``spawn``: fresh
interpreters stay small because this platform accounts forked pages as
private copies rather than shared copy-on-write. ``fork`` remains
available for payloads that cannot be pickled (tasks built from closures).
"""

from __future__ import annotations

import gc
import os
from multiprocessing import get_context

from .frames import iter_frames, write_frame


_WORKER_ENV = "_EHRSTREAM_IN_WORKER"


def _job_shell(worker_fn, args, result_path: str):
    os.environ[_WORKER_ENV] = "1"
    result = worker_fn(args)
    with open(result_path, "wb") as f:
        write_frame(f, result)


def run_jobs(
    worker_fn,
    job_args: list,
    workers: int,
    tmp_dir: str,
    method: str = "spawn",
) -> list:
    """Run ``worker_fn`` over the argument list across worker processes.

    Falsy job arguments are dropped. Results come back in job order. A
    worker that dies without writing its result raises RuntimeError.
    """
    live = [a for a in job_args if a]
    if not live:
        return []
    if workers == 1 or len(live) == 1 or os.environ.get(_WORKER_ENV):
        # never nest worker processes: a worker running this (e.g. through a
        # spawn re-import of an unguarded script) computes inline
        return [worker_fn(a) for a in live]
    ctx = get_context(method)
    if method == "fork":
        # keep child garbage collections from dirtying inherited pages
        gc.freeze()
    result_paths = [
        os.path.join(tmp_dir, f"result-{worker_fn.__name__}-{i}-{os.getpid()}.pkl")
        for i in range(len(live))
    ]
    started = []
    exit_codes = []
    try:
        # at most `workers` processes alive at once
        pending = list(zip(live, result_paths))
        running = []
        while pending or running:
            while pending and len(running) < workers:
                args, path = pending.pop(0)
                p = ctx.Process(
                    target=_job_shell, args=(worker_fn, args, path), daemon=True
                )
                p.start()
                started.append(p)
                running.append(p)
            head = running.pop(0)
            head.join()
            exit_codes.append(head.exitcode)
    finally:
        if method == "fork":
            gc.unfreeze()
        for p in started:
            if p.is_alive():
                p.terminate()
    bad = [c for c in exit_codes if c != 0]
    if bad:
        raise RuntimeError(f"worker process exited with code {bad[0]}")
    results = []
    for path in result_paths:
        with open(path, "rb") as f:
            results.append(next(iter_frames(f)))
        os.unlink(path)
    return results
