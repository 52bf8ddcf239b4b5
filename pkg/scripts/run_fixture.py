#!/usr/bin/env python3
"""Run the ML insight fixture a few times against one cache store.

Shows which steps executed on each run.  By default the second run swaps
in the alternate business table, so only the annotation step (and the
service it depends on) should execute again.
"""

from __future__ import annotations

import argparse
import tempfile
import time
from pathlib import Path

import yaml

from koji import CacheStore, Controller, RunConfig
from koji.backends import LocalBackend, MockBackend, load_scripts
from koji.controller import Binding
from koji.documents import parse_document
from koji.hashing import content_hash_path

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--backend", choices=("local", "mock"), default="local")
    ap.add_argument("--cache", type=Path, help="store directory (default: a fresh temp dir)")
    ap.add_argument("--runs", nargs="+", default=["business.csv", "business2.csv", "business2.csv"],
                    help="business table used by each successive run")
    args = ap.parse_args()

    work = Path(tempfile.mkdtemp(prefix="koji-fixture-"))
    store = CacheStore(args.cache or work / "cache")
    pipeline = parse_document((FIXTURES / "ml-insight.yaml").read_bytes())
    train = FIXTURES / "train.csv"

    for i, table in enumerate(args.runs):
        bindings = {
            "TRAIN": Binding(str(train), content_hash_path(train)),
            "BUSINESS": Binding(str(FIXTURES / table), content_hash_path(FIXTURES / table)),
        }
        if args.backend == "mock":
            backend = MockBackend(load_scripts(yaml.safe_load((FIXTURES / "mock-succeed.yaml").read_text())))
        else:
            backend = LocalBackend(base_dir=FIXTURES)
        config = RunConfig(kill_grace=2.0, run_dir=work / f"run{i}")
        t0 = time.monotonic()
        report = Controller(pipeline, bindings, work / f"out{i}", config, backend, store).run()
        elapsed = time.monotonic() - t0
        counts = " ".join(f"{k}={v}" for k, v in sorted(report.executions().items()))
        print(f"run {i} [{table}] {report.status} in {elapsed:.2f}s  executions: {counts}")
        if report.status != "Delivered":
            print(f"  failed step: {report.failed_step} ({report.reason})")
    print(f"outputs and reports under {work}")


if __name__ == "__main__":
    main()
