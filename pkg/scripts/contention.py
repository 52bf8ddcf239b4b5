#!/usr/bin/env python3
"""Race several processes running the same pipeline against one cold store.

Each repetition starts ``--workers`` processes with random start jitter; all
of them run an identical three-step chain.  With cross-process locking every
step should execute once in aggregate, whichever process gets there first.
"""

from __future__ import annotations

import argparse
import multiprocessing as mp
import random
import tempfile
import time
from collections import Counter
from pathlib import Path

from koji import CacheStore, Controller, RunConfig
from koji.backends import MockBackend, Succeed
from koji.controller import Binding
from koji.hashing import content_hash_path
from koji.model import Pipeline, Resource, argument, container_step, returning

FILE = Resource.of_file()


def chain(length: int) -> Pipeline:
    steps = [argument("A", FILE)]
    prev = ("A", "A")
    for i in range(1, length + 1):
        steps.append(container_step(f"s{i}", "mock", [("in", *prev, FILE)], [("out", FILE)]))
        prev = (f"s{i}", "out")
    steps.append(returning("R", *prev, FILE))
    return Pipeline(tuple(steps))


def worker(root: str, out: str, jitter: float, length: int, delay: float) -> tuple[str, dict]:
    time.sleep(jitter)
    src = Path(root) / "a"
    report = Controller(chain(length), {"A": Binding(str(src), content_hash_path(src))}, out,
                        RunConfig(retry_backoff=0.01), MockBackend(default=Succeed(delay=delay)),
                        CacheStore(Path(root) / "cache")).run()
    return report.status, report.executions()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--delay", type=float, default=0.05, help="mock step duration in seconds")
    ap.add_argument("--jitter", type=float, default=0.1, help="max start offset in seconds")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    base = Path(tempfile.mkdtemp(prefix="koji-contention-"))
    ctx = mp.get_context("spawn")
    violations = 0
    with ctx.Pool(args.workers) as pool:
        for rep in range(args.reps):
            root = base / str(rep)
            root.mkdir()
            (root / "a").write_text(f"input {rep}")
            jobs = [(str(root), str(root / f"out{w}"), rng.uniform(0, args.jitter), args.steps, args.delay)
                    for w in range(args.workers)]
            results = pool.starmap(worker, jobs)
            total = Counter()
            for _, counts in results:
                total.update(counts)
            ok = all(n == 1 for n in total.values()) and len(total) == args.steps \
                and all(status == "Delivered" for status, _ in results)
            violations += not ok
            per_worker = [sum(c.values()) for _, c in results]
            print(f"rep {rep:2d}: aggregate {dict(sorted(total.items()))} per-worker {per_worker}"
                  f"{'' if ok else '  VIOLATION'}")
    print(f"{args.reps} repetitions, {violations} violations")


if __name__ == "__main__":
    main()
