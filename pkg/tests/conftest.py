from __future__ import annotations

import os
from pathlib import Path

import psutil
import pytest

from koji.controller import Binding, Controller, RunConfig
from koji.documents import parse_document
from koji.hashing import content_hash_path
from koji.model import Pipeline, Resource, argument, container_step, returning

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
FILE = Resource.of_file()
CSV = Resource.of_file(format="csv")
SERVICE = Resource.of_service()


def fixture_pipeline():
    return parse_document((FIXTURES / "ml-insight.yaml").read_bytes())


def bind(**paths) -> dict[str, Binding]:
    return {name: Binding(str(p), content_hash_path(p)) for name, p in paths.items()}


def chain3(prefix: str = "s"):
    """A -> s1 -> s2 -> s3 -> R, all plain files."""
    steps = [argument("A", FILE)]
    prev = ("A", "A")
    for i in (1, 2, 3):
        label = f"{prefix}{i}"
        steps.append(container_step(label, "mock", [("in", *prev, FILE)], [("out", FILE)]))
        prev = (label, "out")
    steps.append(returning("R", *prev, FILE))
    return Pipeline(tuple(steps))


def fast_config(tmp_path: Path, **kw) -> RunConfig:
    kw.setdefault("retry_backoff", 0.01)
    kw.setdefault("kill_grace", 1.0)
    return RunConfig(run_dir=tmp_path / "run", **kw)


def run_pipeline(pipeline, bindings, tmp_path, backend, store=None, out="out", **kw):
    config = fast_config(tmp_path, **kw)
    return Controller(pipeline, bindings, tmp_path / out, config, backend, store).run()


def live_children() -> list:
    """Descendant processes of this test process that are still running."""
    me = psutil.Process(os.getpid())
    alive = []
    for child in me.children(recursive=True):
        try:
            if child.status() != psutil.STATUS_ZOMBIE:
                alive.append(child)
        except psutil.NoSuchProcess:
            pass
    return alive


@pytest.fixture
def inputs(tmp_path):
    train = tmp_path / "train.csv"
    train.write_text((FIXTURES / "train.csv").read_text())
    business = tmp_path / "business.csv"
    business.write_text((FIXTURES / "business.csv").read_text())
    business2 = tmp_path / "business2.csv"
    business2.write_text((FIXTURES / "business2.csv").read_text())
    return {"TRAIN": train, "BUSINESS": business, "BUSINESS2": business2}
