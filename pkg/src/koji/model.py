"""In-memory pipeline representation and structural validation.

The dataclasses here mirror the declarative pipeline schema field for field.
All of them are frozen; list-valued fields are normalized to tuples so that
pipelines are hashable and safe to share between threads.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from . import errors
from .errors import PipelineError, VariantViolation


def _tuple(value) -> tuple:
    return tuple(value) if not isinstance(value, tuple) else value


# -- resources ---------------------------------------------------------------


@dataclass(frozen=True)
class FileResource:
    directory: bool = False
    encoding: Optional[str] = None
    format: Optional[str] = None


@dataclass(frozen=True)
class ServiceResource:
    protocol: Optional[str] = None


@dataclass(frozen=True)
class Resource:
    """Edge type: exactly one of ``file`` or ``service`` is set."""

    file: Optional[FileResource] = None
    service: Optional[ServiceResource] = None

    def __post_init__(self):
        if (self.file is None) == (self.service is None):
            raise VariantViolation("exactly one of file/service must be set")

    @classmethod
    def of_file(cls, directory: bool = False, encoding=None, format=None) -> "Resource":
        return cls(file=FileResource(directory, encoding, format))

    @classmethod
    def of_service(cls, protocol=None) -> "Resource":
        return cls(service=ServiceResource(protocol))

    @property
    def is_file(self) -> bool:
        return self.file is not None

    @property
    def is_service(self) -> bool:
        return self.service is not None

    @property
    def kind(self) -> str:
        return "file" if self.is_file else "service"


@dataclass(frozen=True)
class Slot:
    """A named, typed transform input or output."""

    name: str
    resource: Resource


TransformInput = Slot
TransformOutput = Slot


# -- transform logic ---------------------------------------------------------


@dataclass(frozen=True)
class ArgumentLogic:
    name: str
    resource: Resource


@dataclass(frozen=True)
class ReturnLogic:
    name: str
    resource: Resource


@dataclass(frozen=True)
class ContainerInput:
    name: str
    flag: Optional[str] = None
    env: Optional[str] = None


@dataclass(frozen=True)
class ContainerOutput:
    name: str
    flag: Optional[str] = None
    env: Optional[str] = None


@dataclass(frozen=True)
class ContainerFlag:
    name: str
    value: Optional[str] = None


ContainerEnv = ContainerFlag


@dataclass(frozen=True)
class ContainerLogic:
    image: str
    inputs: tuple[ContainerInput, ...] = ()
    outputs: tuple[ContainerOutput, ...] = ()
    flags: tuple[ContainerFlag, ...] = ()
    env: tuple[ContainerFlag, ...] = ()

    def __post_init__(self):
        for name in ("inputs", "outputs", "flags", "env"):
            object.__setattr__(self, name, _tuple(getattr(self, name)))


@dataclass(frozen=True)
class SubpipelineLogic:
    """Runs a whole pipeline as one step.

    ``arguments`` pairs each inner argument name with the outer transform
    input that feeds it; ``returns`` pairs each inner return name with the
    outer transform output it becomes.
    """

    pipeline: "Pipeline"
    arguments: tuple[tuple[str, str], ...] = ()
    returns: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for name in ("arguments", "returns"):
            value = getattr(self, name)
            if isinstance(value, Mapping):
                value = tuple(value.items())
            object.__setattr__(self, name, tuple(tuple(p) for p in value))

    @property
    def argument_map(self) -> dict[str, str]:
        return dict(self.arguments)

    @property
    def return_map(self) -> dict[str, str]:
        return dict(self.returns)


# Backends may contribute further logic classes (see koji.backends.mock).
TransformLogic = Union[ArgumentLogic, ReturnLogic, ContainerLogic, SubpipelineLogic]


@dataclass(frozen=True)
class Transform:
    inputs: tuple[Slot, ...]
    outputs: tuple[Slot, ...]
    logic: object

    def __post_init__(self):
        object.__setattr__(self, "inputs", _tuple(self.inputs))
        object.__setattr__(self, "outputs", _tuple(self.outputs))

    def input(self, name: str) -> Optional[Slot]:
        return next((s for s in self.inputs if s.name == name), None)

    def output(self, name: str) -> Optional[Slot]:
        return next((s for s in self.outputs if s.name == name), None)


@dataclass(frozen=True)
class StepInput:
    name: str
    provider_step_label: str
    provider_output_name: str


@dataclass(frozen=True)
class Step:
    label: str
    inputs: tuple[StepInput, ...]
    transform: Transform

    def __post_init__(self):
        object.__setattr__(self, "inputs", _tuple(self.inputs))

    @property
    def is_argument(self) -> bool:
        return isinstance(self.transform.logic, ArgumentLogic)

    @property
    def is_return(self) -> bool:
        return isinstance(self.transform.logic, ReturnLogic)

    @property
    def is_intermediate(self) -> bool:
        return not (self.is_argument or self.is_return)


@dataclass(frozen=True)
class Pipeline:
    steps: tuple[Step, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", _tuple(self.steps))

    def step(self, label: str) -> Step:
        for s in self.steps:
            if s.label == label:
                return s
        raise KeyError(label)

    def arguments(self) -> dict[str, Step]:
        return {s.transform.logic.name: s for s in self.steps if s.is_argument}

    def returns(self) -> dict[str, Step]:
        return {s.transform.logic.name: s for s in self.steps if s.is_return}


# Convenience constructors used by tests and scripts.


def argument(label: str, resource: Resource, name: Optional[str] = None) -> Step:
    name = name or label
    return Step(label, (), Transform((), (Slot(name, resource),), ArgumentLogic(name, resource)))


def returning(label: str, provider: str, output: str, resource: Resource,
              name: Optional[str] = None) -> Step:
    name = name or label
    return Step(
        label,
        (StepInput(name, provider, output),),
        Transform((Slot(name, resource),), (), ReturnLogic(name, resource)),
    )


def container_step(label: str, image: str, inputs: Iterable[tuple] = (),
                   outputs: Iterable[tuple] = (), flags=(), env=()) -> Step:
    """Container step whose slots are all passed as ``--<slot>=<locator>``.

    ``inputs`` holds ``(name, provider label, provider output, resource)``
    tuples and ``outputs`` holds ``(name, resource)`` pairs.
    """
    inputs, outputs = list(inputs), list(outputs)
    logic = ContainerLogic(
        image,
        tuple(ContainerInput(i[0], flag=i[0]) for i in inputs),
        tuple(ContainerOutput(o[0], flag=o[0]) for o in outputs),
        tuple(flags),
        tuple(env),
    )
    return Step(
        label,
        tuple(StepInput(n, p, o) for n, p, o, _ in inputs),
        Transform(tuple(Slot(n, r) for n, _, _, r in inputs),
                  tuple(Slot(n, r) for n, r in outputs), logic),
    )


# -- dependency graph --------------------------------------------------------


@dataclass(frozen=True, order=True)
class Edge:
    """One dependency: provider output slot -> consumer input slot."""

    provider: str
    output: str
    consumer: str
    input: str
    resource: Resource = field(compare=False)

    def __str__(self) -> str:
        return f"{self.provider}.{self.output} -> {self.consumer}.{self.input}"


@dataclass(frozen=True)
class DependencyGraph:
    pipeline: Pipeline
    steps: Mapping[str, Step]
    edges: tuple[Edge, ...]
    order: tuple[str, ...]
    subgraphs: Mapping[str, "DependencyGraph"] = field(default_factory=dict)

    def in_edges(self, label: str) -> list[Edge]:
        return [e for e in self.edges if e.consumer == label]

    def out_edges(self, label: str) -> list[Edge]:
        return [e for e in self.edges if e.provider == label]

    def consumer_resource(self, edge: Edge) -> Resource:
        return self.steps[edge.consumer].transform.input(edge.input).resource


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    path: Optional[str] = None
    line: Optional[int] = None
    column: Optional[int] = None

    def __str__(self) -> str:
        prefix = "ERROR" if self.severity == "error" else "WARN"
        where = ""
        if self.line is not None:
            where = f" (line {self.line}, column {self.column})"
        elif self.path:
            where = f" (at {self.path})"
        return f"{prefix}: {self.code}: {self.message}{where}"

    @classmethod
    def from_error(cls, err: errors.KojiError, **kw) -> "Diagnostic":
        return cls("error", err.code, str(err), **kw)


def _step_errors(step: Step) -> Iterable[PipelineError]:
    t = step.transform
    if not step.label:
        yield errors.EmptyLabel("step label must be non-empty")
    for direction, slots in (("input", t.inputs), ("output", t.outputs)):
        seen = set()
        for s in slots:
            if s.name in seen:
                yield errors.DuplicateSlotName(step.label, direction, s.name)
            seen.add(s.name)

    logic = t.logic
    if isinstance(logic, ArgumentLogic) and (t.inputs or len(t.outputs) != 1):
        yield errors.ArityViolation(
            step.label, "argument steps need no inputs and exactly one output")
    if isinstance(logic, ReturnLogic) and (len(t.inputs) != 1 or t.outputs):
        yield errors.ArityViolation(
            step.label, "return steps need exactly one input and no outputs")
    if isinstance(logic, ContainerLogic):
        yield from _container_errors(step, logic)
    if isinstance(logic, SubpipelineLogic):
        yield from _subpipeline_errors(step, logic)


def _container_errors(step: Step, logic: ContainerLogic) -> Iterable[PipelineError]:
    t = step.transform
    for kind, bindings, slots in (("input", logic.inputs, t.inputs),
                                  ("output", logic.outputs, t.outputs)):
        declared = {s.name for s in slots}
        bound = set()
        for b in bindings:
            if b.name not in declared:
                yield errors.ContainerBindingError(
                    f"step {step.label!r}: container {kind} {b.name!r} is not a transform {kind}")
            if b.name in bound:
                yield errors.ContainerBindingError(
                    f"step {step.label!r}: container {kind} {b.name!r} bound twice")
            if b.flag is None and b.env is None:
                yield errors.ContainerBindingError(
                    f"step {step.label!r}: container {kind} {b.name!r} sets neither flag nor env")
            bound.add(b.name)
        for name in sorted(declared - bound):
            yield errors.ContainerBindingError(
                f"step {step.label!r}: transform {kind} {name!r} has no container binding")


def _subpipeline_errors(step: Step, logic: SubpipelineLogic) -> Iterable[PipelineError]:
    t = step.transform
    try:
        build_graph(logic.pipeline)
    except PipelineError as err:
        yield errors.SubpipelineMappingError(f"step {step.label!r}: inner pipeline: {err}")
        return
    inner_args = set(logic.pipeline.arguments())
    inner_rets = set(logic.pipeline.returns())
    for what, pairs, inner, outer in (
        ("argument", logic.arguments, inner_args, {s.name for s in t.inputs}),
        ("return", logic.returns, inner_rets, {s.name for s in t.outputs}),
    ):
        inner_seen, outer_seen = set(), set()
        for i, o in pairs:
            if i not in inner:
                yield errors.SubpipelineMappingError(
                    f"step {step.label!r}: inner pipeline has no {what} {i!r}")
            if o not in outer:
                yield errors.SubpipelineMappingError(
                    f"step {step.label!r}: {what} {i!r} maps to undeclared slot {o!r}")
            if i in inner_seen or o in outer_seen:
                yield errors.SubpipelineMappingError(
                    f"step {step.label!r}: {what} mapping {i!r}->{o!r} is not one-to-one")
            inner_seen.add(i)
            outer_seen.add(o)
        for name in sorted(inner - inner_seen):
            yield errors.SubpipelineMappingError(
                f"step {step.label!r}: inner {what} {name!r} is not mapped")
        for name in sorted(outer - outer_seen):
            yield errors.SubpipelineMappingError(
                f"step {step.label!r}: slot {name!r} has no inner {what}")


def _find_cycle(labels: Iterable[str], succ: Mapping[str, set[str]]) -> Optional[list[str]]:
    white, grey, black = 0, 1, 2
    color = {v: white for v in labels}
    stack: list[str] = []

    def visit(v: str) -> Optional[list[str]]:
        color[v] = grey
        stack.append(v)
        for w in sorted(succ.get(v, ())):
            if color[w] == grey:
                return stack[stack.index(w):] + [w]
            if color[w] == white:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        color[v] = black
        return None

    for v in sorted(color):
        if color[v] == white:
            found = visit(v)
            if found:
                return found
    return None


def structural_errors(pipeline: Pipeline) -> list[PipelineError]:
    """Every structural defect of ``pipeline``, in a stable order."""
    found: list[PipelineError] = []
    steps: dict[str, Step] = {}
    for step in pipeline.steps:
        if step.label in steps:
            found.append(errors.DuplicateLabel(step.label))
        steps.setdefault(step.label, step)
        found.extend(_step_errors(step))

    for kind, names in (("argument", [s.transform.logic.name for s in pipeline.steps if s.is_argument]),
                        ("return", [s.transform.logic.name for s in pipeline.steps if s.is_return])):
        dup = sorted({n for n in names if names.count(n) > 1})
        for n in dup:
            found.append(errors.DuplicateBoundaryName(f"{kind} name {n!r} is declared by several steps"))

    succ: dict[str, set[str]] = {label: set() for label in steps}
    for step in pipeline.steps:
        declared = {s.name for s in step.transform.inputs}
        bound: set[str] = set()
        for si in step.inputs:
            if si.name in bound:
                found.append(errors.DuplicateInputBinding(step.label, si.name))
            bound.add(si.name)
            if si.name not in declared:
                found.append(errors.UnknownInputBinding(step.label, si.name))
            provider = steps.get(si.provider_step_label)
            if provider is None:
                found.append(errors.UnknownProvider(step.label, si.provider_step_label))
                continue
            if provider.transform.output(si.provider_output_name) is None:
                found.append(errors.UnknownProviderOutput(
                    step.label, si.provider_step_label, si.provider_output_name))
                continue
            succ[provider.label].add(step.label)
        for name in [s.name for s in step.transform.inputs if s.name not in bound]:
            found.append(errors.MissingInputBinding(step.label, name))

    cycle = _find_cycle(steps, succ)
    if cycle:
        found.append(errors.CycleDetected(cycle))
    return found


def build_graph(pipeline: Pipeline) -> DependencyGraph:
    """Validate ``pipeline`` and return its dependency graph.

    Raises the first structural error found; use :func:`validate_document`
    to collect all of them.
    """
    problems = structural_errors(pipeline)
    if problems:
        raise problems[0]
    steps = {s.label: s for s in pipeline.steps}
    raw = []
    for step in pipeline.steps:
        for si in step.inputs:
            provider = steps[si.provider_step_label]
            res = provider.transform.output(si.provider_output_name).resource
            raw.append(Edge(provider.label, si.provider_output_name, step.label, si.name, res))
    order = _topo(steps, raw)
    rank = {label: i for i, label in enumerate(order)}
    edges = tuple(sorted(raw, key=lambda e: (rank[e.consumer], e.input)))
    subgraphs = {
        s.label: build_graph(s.transform.logic.pipeline)
        for s in pipeline.steps
        if isinstance(s.transform.logic, SubpipelineLogic)
    }
    return DependencyGraph(pipeline, steps, edges, tuple(order), subgraphs)


def _topo(labels: Iterable[str], edges: Iterable[Edge]) -> list[str]:
    indeg = {label: 0 for label in labels}
    succ: dict[str, list[str]] = {label: [] for label in indeg}
    for e in edges:
        indeg[e.consumer] += 1
        succ[e.provider].append(e.consumer)
    ready = [label for label, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    return order


def topo_order(graph: DependencyGraph) -> list[str]:
    """Providers before consumers; ties broken by label order."""
    return list(graph.order)


def validate_document(pipeline: Pipeline) -> list[Diagnostic]:
    found = [Diagnostic.from_error(e) for e in structural_errors(pipeline)]
    if not any(s.is_return for s in pipeline.steps):
        found.append(Diagnostic(
            "warning", "NoReturnSteps", "pipeline has no return steps; nothing will run"))
    return found
