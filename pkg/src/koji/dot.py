"""Graphviz rendering of a dependency graph.

File edges are drawn solid; service edges carry ``style=dashed``.  Output is
deterministic: nodes in topological order, edges in graph order.
"""

from __future__ import annotations

from .model import ArgumentLogic, ContainerLogic, DependencyGraph, ReturnLogic, SubpipelineLogic


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _shape(logic) -> str:
    if isinstance(logic, (ArgumentLogic, ReturnLogic)):
        return "ellipse"
    if isinstance(logic, SubpipelineLogic):
        return "box3d"
    return "box"


def _node_label(label: str, logic) -> str:
    if isinstance(logic, ArgumentLogic):
        return f"arg {logic.name}"
    if isinstance(logic, ReturnLogic):
        return f"return {logic.name}"
    if isinstance(logic, ContainerLogic):
        return f"{label}\\n{logic.image}"
    return label


def to_dot(graph: DependencyGraph, name: str = "pipeline") -> str:
    lines = [f"digraph {_quote(name)} {{", "  rankdir=LR;"]
    for label in graph.order:
        logic = graph.steps[label].transform.logic
        text = _node_label(label, logic).replace('"', '\\"')
        lines.append(f'  {_quote(label)} [shape={_shape(logic)}, label="{text}"];')
    for e in graph.edges:
        attrs = [f'label={_quote(f"{e.output} -> {e.input}")}']
        if e.resource is not None and e.resource.is_service:
            attrs.append("style=dashed")
        lines.append(f"  {_quote(e.provider)} -> {_quote(e.consumer)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
