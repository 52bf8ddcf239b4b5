"""Pre-execution resource type checking across pipeline edges."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .model import DependencyGraph, Edge, Resource

KIND_MISMATCH = "KindMismatch"
DIRECTORY_MISMATCH = "DirectoryMismatch"
FORMAT_MISMATCH = "FormatMismatch"
ENCODING_MISMATCH = "EncodingMismatch"
PROTOCOL_MISMATCH = "ProtocolMismatch"


@dataclass(frozen=True)
class TypeDiagnostic:
    edge: Edge
    kind: str
    provider_value: object
    consumer_value: object

    def __str__(self) -> str:
        return (f"ERROR: {self.kind}: edge {self.edge}: "
                f"provider {self.provider_value!r} vs consumer {self.consumer_value!r}")


def _clash(a: Optional[str], b: Optional[str]) -> bool:
    # An unset side is a wildcard; set strings are opaque and compared exactly.
    return a is not None and b is not None and a != b


def mismatch(provider: Resource, consumer: Resource) -> Optional[tuple[str, object, object]]:
    """First failing rule as ``(kind, provider_value, consumer_value)``, else None."""
    if provider.kind != consumer.kind:
        return KIND_MISMATCH, provider.kind, consumer.kind
    if provider.is_file:
        p, c = provider.file, consumer.file
        if p.directory != c.directory:
            return DIRECTORY_MISMATCH, p.directory, c.directory
        if _clash(p.format, c.format):
            return FORMAT_MISMATCH, p.format, c.format
        if _clash(p.encoding, c.encoding):
            return ENCODING_MISMATCH, p.encoding, c.encoding
        return None
    if _clash(provider.service.protocol, consumer.service.protocol):
        return PROTOCOL_MISMATCH, provider.service.protocol, consumer.service.protocol
    return None


def fulfills(provider: Resource, consumer: Resource) -> Optional[str]:
    """Return None when ``provider`` satisfies ``consumer``, else the diagnostic kind."""
    found = mismatch(provider, consumer)
    return found[0] if found else None


def check_pipeline(graph: DependencyGraph) -> list[TypeDiagnostic]:
    """One diagnostic per mistyped edge, in consumer topological order.

    Inner pipelines of subpipeline steps are checked too; their edges are
    reported with the enclosing step label as a ``label/`` prefix.
    """
    found = []
    for edge in graph.edges:
        bad = mismatch(edge.resource, graph.consumer_resource(edge))
        if bad:
            found.append(TypeDiagnostic(edge, *bad))
    for label in graph.order:
        sub = graph.subgraphs.get(label)
        if sub is None:
            continue
        step = graph.steps[label]
        logic = step.transform.logic
        inner_args, inner_rets = sub.pipeline.arguments(), sub.pipeline.returns()
        for inner, outer in logic.arguments:
            slot, target = step.transform.input(outer), inner_args[inner]
            bad = mismatch(slot.resource, target.transform.outputs[0].resource)
            if bad:
                edge = Edge(label, outer, f"{label}/{target.label}", inner, slot.resource)
                found.append(TypeDiagnostic(edge, *bad))
        for inner, outer in logic.returns:
            slot, source = step.transform.output(outer), inner_rets[inner]
            res = source.transform.inputs[0].resource
            bad = mismatch(res, slot.resource)
            if bad:
                edge = Edge(f"{label}/{source.label}", inner, label, outer, res)
                found.append(TypeDiagnostic(edge, *bad))
        for d in check_pipeline(sub):
            e = d.edge
            prefixed = Edge(f"{label}/{e.provider}", e.output, f"{label}/{e.consumer}", e.input, e.resource)
            found.append(TypeDiagnostic(prefixed, d.kind, d.provider_value, d.consumer_value))
    return found
