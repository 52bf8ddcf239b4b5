"""Pipeline documents in YAML or JSON.

Keys mirror the protobuf schema field names (``steps``, ``label``,
``provider_step_label`` ...).  Logic variants are ``arg``, ``return``,
``container`` and ``subpipeline``; resources are ``file`` or ``service``.
Diagnostics carry 1-based line/column positions of the offending node.
"""

from __future__ import annotations

import json
from typing import Any, Optional, Union

import yaml

from .errors import DocumentError
from .model import (
    ArgumentLogic,
    ContainerFlag,
    ContainerInput,
    ContainerLogic,
    ContainerOutput,
    Diagnostic,
    FileResource,
    Pipeline,
    Resource,
    ReturnLogic,
    ServiceResource,
    Slot,
    Step,
    StepInput,
    SubpipelineLogic,
    Transform,
)

_MISSING = object()


class _Reader:
    def __init__(self, strict: bool):
        self.strict = strict
        self.diagnostics: list[Diagnostic] = []
        self._loader = yaml.SafeLoader("")

    def report(self, severity, code, message, path, node) -> None:
        line = column = None
        if node is not None and node.start_mark is not None:
            line, column = node.start_mark.line + 1, node.start_mark.column + 1
        self.diagnostics.append(Diagnostic(severity, code, message, path, line, column))

    def error(self, code, message, path, node) -> None:
        self.report("error", code, message, path, node)

    # -- node helpers --------------------------------------------------------

    def mapping(self, node, path: str, allowed: tuple[str, ...]) -> Optional[dict]:
        if not isinstance(node, yaml.MappingNode):
            self.error("TypeError", f"{path}: expected a mapping", path, node)
            return None
        fields = {}
        for key_node, value_node in node.value:
            key = self.scalar(key_node, path)
            if key not in allowed:
                severity = "error" if self.strict else "warning"
                self.report(severity, "UnknownField", f"{path}.{key}: unknown field", f"{path}.{key}", key_node)
                continue
            if key in fields:
                self.error("DuplicateField", f"{path}.{key}: repeated key", f"{path}.{key}", key_node)
            fields[key] = value_node
        return fields

    def sequence(self, node, path: str) -> list:
        if node is None:
            return []
        if isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null"):
            return []
        if not isinstance(node, yaml.SequenceNode):
            self.error("TypeError", f"{path}: expected a list", path, node)
            return []
        return node.value

    def scalar(self, node, path: str) -> Any:
        if not isinstance(node, yaml.ScalarNode):
            self.error("TypeError", f"{path}: expected a scalar", path, node)
            return None
        return self._loader.construct_object(node, deep=True)

    def string(self, fields: dict, key: str, path: str, required: bool = False, parent=None):
        node = fields.get(key)
        if node is None:
            if required:
                self.error("MissingField", f"{path}.{key}: required field missing", f"{path}.{key}", parent)
                return None
            return None
        value = self.scalar(node, f"{path}.{key}")
        if value is None:
            if required:
                self.error("MissingField", f"{path}.{key}: required field is null", f"{path}.{key}", node)
            return None
        if not isinstance(value, str):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.error("TypeError", f"{path}.{key}: expected a string", f"{path}.{key}", node)
                return None
            value = str(value)
        return value

    def oneof(self, fields: dict, path: str, node, variants: tuple[str, ...]) -> Optional[str]:
        present = [k for k in variants if k in fields]
        if len(present) != 1:
            self.error("VariantViolation",
                       f"{path}: exactly one of {'/'.join(variants)} must be set"
                       + (f" (found {', '.join(present)})" if present else ""), path, node)
            return None
        return present[0]

    # -- schema --------------------------------------------------------------

    def pipeline(self, node, path: str = "pipeline") -> Optional[Pipeline]:
        fields = self.mapping(node, path, ("steps",))
        if fields is None:
            return None
        steps = [self.step(n, f"{path}.steps[{i}]") for i, n in enumerate(self.sequence(fields.get("steps"), f"{path}.steps"))]
        if any(s is None for s in steps):
            return None
        return Pipeline(tuple(steps))

    def step(self, node, path: str) -> Optional[Step]:
        fields = self.mapping(node, path, ("label", "inputs", "transform"))
        if fields is None:
            return None
        label = self.string(fields, "label", path, required=True, parent=node)
        inputs = [self.step_input(n, f"{path}.inputs[{i}]")
                  for i, n in enumerate(self.sequence(fields.get("inputs"), f"{path}.inputs"))]
        if "transform" not in fields:
            self.error("MissingField", f"{path}.transform: required field missing", f"{path}.transform", node)
            return None
        transform = self.transform(fields["transform"], f"{path}.transform")
        if label is None or transform is None or any(i is None for i in inputs):
            return None
        return Step(label, tuple(inputs), transform)

    def step_input(self, node, path: str) -> Optional[StepInput]:
        keys = ("name", "provider_step_label", "provider_output_name")
        fields = self.mapping(node, path, keys)
        if fields is None:
            return None
        values = [self.string(fields, k, path, required=True, parent=node) for k in keys]
        if any(v is None for v in values):
            return None
        return StepInput(*values)

    def transform(self, node, path: str) -> Optional[Transform]:
        fields = self.mapping(node, path, ("inputs", "outputs", "logic"))
        if fields is None:
            return None
        slots = {}
        for key in ("inputs", "outputs"):
            slots[key] = [self.slot(n, f"{path}.{key}[{i}]")
                          for i, n in enumerate(self.sequence(fields.get(key), f"{path}.{key}"))]
        if "logic" not in fields:
            self.error("MissingField", f"{path}.logic: required field missing", f"{path}.logic", node)
            return None
        logic = self.logic(fields["logic"], f"{path}.logic")
        if logic is None or any(s is None for s in slots["inputs"] + slots["outputs"]):
            return None
        return Transform(tuple(slots["inputs"]), tuple(slots["outputs"]), logic)

    def slot(self, node, path: str) -> Optional[Slot]:
        fields = self.mapping(node, path, ("name", "resource"))
        if fields is None:
            return None
        name = self.string(fields, "name", path, required=True, parent=node)
        if "resource" not in fields:
            self.error("MissingField", f"{path}.resource: required field missing", f"{path}.resource", node)
            return None
        resource = self.resource(fields["resource"], f"{path}.resource")
        if name is None or resource is None:
            return None
        return Slot(name, resource)

    def resource(self, node, path: str) -> Optional[Resource]:
        fields = self.mapping(node, path, ("file", "service"))
        if fields is None:
            return None
        kind = self.oneof(fields, path, node, ("file", "service"))
        if kind is None:
            return None
        inner_path = f"{path}.{kind}"
        inner_node = fields[kind]
        if isinstance(inner_node, yaml.ScalarNode) and inner_node.tag.endswith(":null"):
            sub = {}
        else:
            keys = ("directory", "encoding", "format") if kind == "file" else ("protocol",)
            sub = self.mapping(inner_node, inner_path, keys)
            if sub is None:
                return None
        if kind == "service":
            return Resource(service=ServiceResource(self.string(sub, "protocol", inner_path)))
        directory = False
        if "directory" in sub:
            directory = self.scalar(sub["directory"], f"{inner_path}.directory")
            if not isinstance(directory, bool):
                self.error("TypeError", f"{inner_path}.directory: expected true/false",
                           f"{inner_path}.directory", sub["directory"])
                return None
        return Resource(file=FileResource(
            directory, self.string(sub, "encoding", inner_path), self.string(sub, "format", inner_path)))

    def logic(self, node, path: str):
        fields = self.mapping(node, path, ("arg", "return", "container", "subpipeline"))
        if fields is None:
            return None
        kind = self.oneof(fields, path, node, ("arg", "return", "container", "subpipeline"))
        if kind is None:
            return None
        sub_node, sub_path = fields[kind], f"{path}.{kind}"
        if kind in ("arg", "return"):
            sub = self.mapping(sub_node, sub_path, ("name", "resource"))
            if sub is None:
                return None
            name = self.string(sub, "name", sub_path, required=True, parent=sub_node)
            if "resource" not in sub:
                self.error("MissingField", f"{sub_path}.resource: required field missing",
                           f"{sub_path}.resource", sub_node)
                return None
            resource = self.resource(sub["resource"], f"{sub_path}.resource")
            if name is None or resource is None:
                return None
            return (ArgumentLogic if kind == "arg" else ReturnLogic)(name, resource)
        if kind == "container":
            return self.container(sub_node, sub_path)
        return self.subpipeline(sub_node, sub_path)

    def container(self, node, path: str) -> Optional[ContainerLogic]:
        fields = self.mapping(node, path, ("image", "inputs", "outputs", "flags", "env"))
        if fields is None:
            return None
        image = self.string(fields, "image", path, required=True, parent=node)
        ok = image is not None
        ios = {}
        for key, cls in (("inputs", ContainerInput), ("outputs", ContainerOutput)):
            items = []
            for i, n in enumerate(self.sequence(fields.get(key), f"{path}.{key}")):
                p = f"{path}.{key}[{i}]"
                sub = self.mapping(n, p, ("name", "flag", "env", "format"))
                if sub is None:
                    ok = False
                    continue
                fmt = sub.get("format")
                if fmt is not None and not (isinstance(fmt, yaml.ScalarNode) and fmt.tag.endswith(":null")):
                    self.error("Unsupported", f"{p}.format: only the default locator formats are supported",
                               f"{p}.format", sub["format"])
                    ok = False
                name = self.string(sub, "name", p, required=True, parent=n)
                ok = ok and name is not None
                items.append(cls(name, self.string(sub, "flag", p), self.string(sub, "env", p)))
            ios[key] = tuple(items)
        kvs = {}
        for key in ("flags", "env"):
            items = []
            for i, n in enumerate(self.sequence(fields.get(key), f"{path}.{key}")):
                p = f"{path}.{key}[{i}]"
                sub = self.mapping(n, p, ("name", "value"))
                if sub is None:
                    ok = False
                    continue
                name = self.string(sub, "name", p, required=True, parent=n)
                ok = ok and name is not None
                items.append(ContainerFlag(name, self.string(sub, "value", p)))
            kvs[key] = tuple(items)
        if not ok:
            return None
        return ContainerLogic(image, ios["inputs"], ios["outputs"], kvs["flags"], kvs["env"])

    def subpipeline(self, node, path: str) -> Optional[SubpipelineLogic]:
        fields = self.mapping(node, path, ("pipeline", "arguments", "returns"))
        if fields is None:
            return None
        if "pipeline" not in fields:
            self.error("MissingField", f"{path}.pipeline: required field missing", f"{path}.pipeline", node)
            return None
        inner = self.pipeline(fields["pipeline"], f"{path}.pipeline")
        maps = {}
        for key in ("arguments", "returns"):
            pairs = []
            sub_node = fields.get(key)
            if sub_node is not None:
                if not isinstance(sub_node, yaml.MappingNode):
                    self.error("TypeError", f"{path}.{key}: expected a mapping", f"{path}.{key}", sub_node)
                    return None
                for k, v in sub_node.value:
                    pairs.append((str(self.scalar(k, f"{path}.{key}")), str(self.scalar(v, f"{path}.{key}"))))
            maps[key] = tuple(pairs)
        if inner is None:
            return None
        return SubpipelineLogic(inner, maps["arguments"], maps["returns"])


def _compose(data: Union[str, bytes], fmt: Optional[str]):
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if fmt is None:
        fmt = "json" if data.lstrip().startswith("{") else "yaml"
    if fmt == "json":
        try:
            json.loads(data)
        except json.JSONDecodeError as err:
            raise DocumentError([Diagnostic("error", "SyntaxError", err.msg, None, err.lineno, err.colno)])
    elif fmt != "yaml":
        raise ValueError(f"unknown document format {fmt!r}")
    try:
        return yaml.compose(data, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise DocumentError([Diagnostic("error", "SyntaxError", str(err.problem or err), None, line, col)])


def load_document(
    data: Union[str, bytes], fmt: Optional[str] = None, strict: bool = True
) -> tuple[Optional[Pipeline], list[Diagnostic]]:
    """Parse a pipeline document, returning it with every diagnostic found."""
    try:
        node = _compose(data, fmt)
    except DocumentError as err:
        return None, err.diagnostics
    if node is None:
        return Pipeline(()), []
    reader = _Reader(strict)
    pipeline = reader.pipeline(node)
    if any(d.severity == "error" for d in reader.diagnostics):
        pipeline = None
    return pipeline, reader.diagnostics


def parse_document(data: Union[str, bytes], fmt: Optional[str] = None, strict: bool = True) -> Pipeline:
    pipeline, diagnostics = load_document(data, fmt, strict)
    if pipeline is None:
        raise DocumentError(diagnostics)
    return pipeline


def format_for(path) -> Optional[str]:
    suffix = str(path).rsplit(".", 1)[-1].lower()
    return {"json": "json", "yaml": "yaml", "yml": "yaml"}.get(suffix)


# -- serialization -----------------------------------------------------------


def _resource(r: Resource) -> dict:
    if r.is_service:
        return {"service": {} if r.service.protocol is None else {"protocol": r.service.protocol}}
    out: dict = {"directory": r.file.directory}
    if r.file.encoding is not None:
        out["encoding"] = r.file.encoding
    if r.file.format is not None:
        out["format"] = r.file.format
    return {"file": out}


def _opt(d: dict, **kw) -> dict:
    d.update({k: v for k, v in kw.items() if v is not None})
    return d


def _logic(logic) -> dict:
    if isinstance(logic, ArgumentLogic):
        return {"arg": {"name": logic.name, "resource": _resource(logic.resource)}}
    if isinstance(logic, ReturnLogic):
        return {"return": {"name": logic.name, "resource": _resource(logic.resource)}}
    if isinstance(logic, ContainerLogic):
        c: dict = {"image": logic.image}
        for key in ("inputs", "outputs"):
            items = getattr(logic, key)
            if items:
                c[key] = [_opt({"name": b.name}, flag=b.flag, env=b.env) for b in items]
        for key in ("flags", "env"):
            items = getattr(logic, key)
            if items:
                c[key] = [_opt({"name": f.name}, value=f.value) for f in items]
        return {"container": c}
    if isinstance(logic, SubpipelineLogic):
        return {"subpipeline": {
            "pipeline": pipeline_to_dict(logic.pipeline),
            "arguments": dict(logic.arguments),
            "returns": dict(logic.returns),
        }}
    raise TypeError(f"{type(logic).__name__} has no document form")


def pipeline_to_dict(p: Pipeline) -> dict:
    steps = []
    for s in p.steps:
        d: dict = {"label": s.label}
        if s.inputs:
            d["inputs"] = [
                {"name": i.name, "provider_step_label": i.provider_step_label,
                 "provider_output_name": i.provider_output_name}
                for i in s.inputs
            ]
        t: dict = {}
        if s.transform.inputs:
            t["inputs"] = [{"name": x.name, "resource": _resource(x.resource)} for x in s.transform.inputs]
        if s.transform.outputs:
            t["outputs"] = [{"name": x.name, "resource": _resource(x.resource)} for x in s.transform.outputs]
        t["logic"] = _logic(s.transform.logic)
        d["transform"] = t
        steps.append(d)
    return {"steps": steps}


def serialize_document(p: Pipeline, fmt: str = "yaml") -> str:
    data = pipeline_to_dict(p)
    if fmt == "json":
        return json.dumps(data, indent=2) + "\n"
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False)
