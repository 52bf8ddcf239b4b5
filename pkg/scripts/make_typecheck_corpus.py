#!/usr/bin/env python3
"""Regenerate fixtures/typecheck/: mistyped and well-typed pipeline documents.

Each mistyped document is the ML fixture with one slot retyped; the manifest
records the diagnostic kind and edge the type checker must report.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from koji.documents import parse_document, serialize_document
from koji.model import (
    Pipeline,
    Resource,
    Slot,
    Step,
    StepInput,
    SubpipelineLogic,
    Transform,
    argument,
    container_step,
    returning,
)

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "fixtures" / "typecheck"


def base() -> Pipeline:
    return parse_document((ROOT / "fixtures" / "ml-insight.yaml").read_bytes())


def retype(p: Pipeline, label: str, side: str, name: str, res: Resource) -> Pipeline:
    steps = []
    for s in p.steps:
        if s.label == label:
            slots = tuple(Slot(x.name, res) if x.name == name else x for x in getattr(s.transform, side))
            logic = s.transform.logic
            if hasattr(logic, "resource") and hasattr(logic, "name"):
                logic = replace(logic, resource=res)
            s = replace(s, transform=replace(s.transform, **{side: slots}, logic=logic))
        steps.append(s)
    return Pipeline(tuple(steps))


def csv(**kw) -> Resource:
    kw.setdefault("format", "csv")
    return Resource.of_file(**kw)


MISTYPED = [
    ("kind-file-to-service", ("serve", "inputs", "model", Resource.of_service()),
     "KindMismatch", "train.model -> serve.model"),
    ("kind-service-to-file", ("annotate", "inputs", "model", Resource.of_file()),
     "KindMismatch", "serve.endpoint -> annotate.model"),
    ("dir-consumer", ("train", "inputs", "data", csv(directory=True)),
     "DirectoryMismatch", "TRAIN.TRAIN -> train.data"),
    ("dir-provider", ("train", "outputs", "model", Resource.of_file(True, format="model")),
     "DirectoryMismatch", "train.model -> serve.model"),
    ("format-train", ("train", "inputs", "data", csv(format="json")),
     "FormatMismatch", "TRAIN.TRAIN -> train.data"),
    ("format-table", ("annotate", "inputs", "table", csv(format="tsv")),
     "FormatMismatch", "BUSINESS.BUSINESS -> annotate.table"),
    ("format-return", ("INSIGHT", "inputs", "INSIGHT", csv(format="parquet")),
     "FormatMismatch", "annotate.insight -> INSIGHT.INSIGHT"),
    ("encoding-both-sides", [("TRAIN", "outputs", "TRAIN", csv(encoding="utf-8")),
                             ("train", "inputs", "data", csv(encoding="latin-1"))],
     "EncodingMismatch", "TRAIN.TRAIN -> train.data"),
    ("protocol", [("serve", "outputs", "endpoint", Resource.of_service("openapi://a.Model")),
                  ("annotate", "inputs", "model", Resource.of_service("grpc://b.Model"))],
     "ProtocolMismatch", "serve.endpoint -> annotate.model"),
    ("encoding-return", [("annotate", "outputs", "insight", csv(encoding="utf-16")),
                         ("INSIGHT", "inputs", "INSIGHT", csv(encoding="utf-8"))],
     "EncodingMismatch", "annotate.insight -> INSIGHT.INSIGHT"),
]


def well_typed() -> dict[str, Pipeline]:
    f = Resource.of_file()
    d = Resource.of_file(directory=True)
    fixture = base()
    inner = Pipeline((argument("X", f), returning("Y", "X", "X", f)))
    sub = Step("copy", (StepInput("i", "A", "A"),), Transform(
        (Slot("i", f),), (Slot("o", f),), SubpipelineLogic(inner, {"X": "i"}, {"Y": "o"})))
    return {
        "fixture": fixture,
        "wildcard-consumer-format": retype(fixture, "train", "inputs", "data", Resource.of_file()),
        "wildcard-provider-protocol": retype(retype(fixture, "serve", "outputs", "endpoint",
                                                    Resource.of_service()),
                                             "annotate", "inputs", "model",
                                             Resource.of_service("openapi://a.Model")),
        "matching-protocols": retype(retype(fixture, "serve", "outputs", "endpoint",
                                            Resource.of_service("grpc://m.M")),
                                     "annotate", "inputs", "model", Resource.of_service("grpc://m.M")),
        "matching-encodings": retype(retype(fixture, "TRAIN", "outputs", "TRAIN", csv(encoding="utf-8")),
                                     "train", "inputs", "data", csv(encoding="utf-8")),
        "minimal": Pipeline((argument("A", f), returning("R", "A", "A", f))),
        "directories": Pipeline((argument("A", d), container_step("ls", "ls", [("d", "A", "A", d)], [("o", f)]),
                                 returning("R", "ls", "o", f))),
        "service-argument": Pipeline((argument("S", Resource.of_service()),
                                      container_step("q", "q", [("s", "S", "S", Resource.of_service())],
                                                     [("o", f)]),
                                      returning("R", "q", "o", f))),
        "subpipeline": Pipeline((argument("A", f), sub, returning("R", "copy", "o", f))),
        "fan-out": Pipeline((argument("A", f),
                             container_step("x", "x", [("i", "A", "A", f)], [("o", f)]),
                             container_step("y", "y", [("i", "A", "A", f), ("j", "x", "o", f)], [("o", f)]),
                             returning("R", "y", "o", f))),
    }


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for old in OUT.glob("*.yaml"):
        old.unlink()
    manifest = {}
    for i, (name, changes, kind, edge) in enumerate(MISTYPED, 1):
        p = base()
        for change in changes if isinstance(changes, list) else [changes]:
            p = retype(p, *change)
        fname = f"bad-{i:02d}-{name}.yaml"
        (OUT / fname).write_text(serialize_document(p))
        manifest[fname] = {"exit": 2, "kind": kind, "edge": edge}
    for i, (name, p) in enumerate(well_typed().items(), 1):
        fname = f"good-{i:02d}-{name}.yaml"
        (OUT / fname).write_text(serialize_document(p))
        manifest[fname] = {"exit": 0}
    (OUT / "expected.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest)} documents to {OUT}")


if __name__ == "__main__":
    main()
