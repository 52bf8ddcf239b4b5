"""Causal hashing: cache keys for edge resources computable before execution.

A causal hash for a step output is SHA-256 over a canonical encoding of the
sorted ``(input name, input hash)`` pairs, the transform identity bytes and
the output name.  Pipeline argument hashes are supplied by the caller, usually
via :func:`content_hash_path`.
"""

from __future__ import annotations

import hashlib
import os
import stat
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

from . import errors
from .model import (
    ArgumentLogic,
    ContainerLogic,
    DependencyGraph,
    Edge,
    Pipeline,
    Resource,
    ReturnLogic,
    SubpipelineLogic,
)

FILE_TAG = b"file\0"
DIR_TAG = b"dir\0"
CAUSAL_TAG = b"causal\0"
_CHUNK = 1 << 20


@dataclass(frozen=True, order=True)
class CausalHash:
    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise ValueError("causal hash digest must be 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "CausalHash":
        if len(text) != 64 or text != text.lower():
            raise ValueError(f"expected 64 lowercase hex characters, got {text!r}")
        return cls(bytes.fromhex(text))

    @classmethod
    def of(cls, *parts: bytes) -> "CausalHash":
        h = hashlib.sha256()
        for p in parts:
            h.update(p)
        return cls(h.digest())

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"CausalHash({self.hex[:12]}…)"


def _u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def _lp(data: Union[bytes, str]) -> bytes:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return _u64(len(data)) + data


# -- content hashing ---------------------------------------------------------


def _file_digest(path: Path) -> CausalHash:
    h = hashlib.sha256(FILE_TAG)
    with open(path, "rb") as f:
        while chunk := f.read(_CHUNK):
            h.update(chunk)
    return CausalHash(h.digest())


def content_hash_path(path: Union[str, os.PathLike]) -> CausalHash:
    """Content hash of a regular file, or Merkle hash of a directory tree.

    Directory entries are taken in byte order of their names, each
    contributing its name, a kind byte and its own hash.  Symlinks and
    special files are refused.
    """
    path = Path(path)
    try:
        st = os.lstat(path)
    except FileNotFoundError:
        raise errors.NotFound(f"no such file or directory: {path}") from None
    if stat.S_ISLNK(st.st_mode):
        raise errors.UnsupportedEntry(f"symlink not supported: {path}")
    if stat.S_ISREG(st.st_mode):
        return _file_digest(path)
    if not stat.S_ISDIR(st.st_mode):
        raise errors.UnsupportedEntry(f"not a regular file or directory: {path}")
    h = hashlib.sha256(DIR_TAG)
    names = sorted(os.listdir(path), key=os.fsencode)
    h.update(_u64(len(names)))
    for name in names:
        child = path / name
        child_hash = content_hash_path(child)
        kind = b"d" if child.is_dir() else b"f"
        h.update(_lp(os.fsencode(name)) + kind + child_hash.digest)
    return CausalHash(h.digest())


# -- transform identity ------------------------------------------------------
#
# Canonical encoding: every message is a sequence of fields in field-number
# order; a field is ``u32 number`` followed by ``\x00`` (absent) or ``\x01``
# plus a length-prefixed body.  Repeated fields encode a count followed by
# length-prefixed elements.

_ABSENT = b"\x00"


def _field(number: int, body) -> bytes:
    head = struct.pack(">I", number)
    if body is None:
        return head + _ABSENT
    if isinstance(body, bool):
        body = b"\x01" if body else b"\x00"
    return head + b"\x01" + _lp(body)


def _repeated(number: int, items: Iterable[bytes]) -> bytes:
    items = list(items)
    return _field(number, _u64(len(items)) + b"".join(_lp(i) for i in items))


def encode_resource(r: Resource) -> bytes:
    file_part = None
    if r.file is not None:
        f = r.file
        file_part = _field(1, f.directory) + _field(2, f.encoding) + _field(3, f.format)
    service_part = None
    if r.service is not None:
        service_part = _field(1, r.service.protocol)
    return _field(1, file_part) + _field(2, service_part)


def _encode_slot(slot) -> bytes:
    return _field(1, slot.name) + _field(10, encode_resource(slot.resource))


def _encode_container(c: ContainerLogic) -> bytes:
    def io(b):
        return _field(1, b.name) + _field(2, b.flag) + _field(3, b.env) + _field(4, None)

    def kv(f):
        return _field(1, f.name) + _field(2, f.value)

    return (
        _field(10, c.image)
        + _repeated(20, (io(b) for b in c.inputs))
        + _repeated(21, (io(b) for b in c.outputs))
        + _repeated(22, (kv(f) for f in sorted(c.flags, key=lambda f: (f.name, f.value or ""))))
        + _repeated(23, (kv(f) for f in sorted(c.env, key=lambda f: (f.name, f.value or ""))))
    )


def encode_pipeline(p: Pipeline) -> bytes:
    def step(s):
        inputs = (
            _field(1, i.name) + _field(2, i.provider_step_label) + _field(3, i.provider_output_name)
            for i in s.inputs
        )
        t = s.transform
        transform = (
            _repeated(1, (_encode_slot(x) for x in t.inputs))
            + _repeated(2, (_encode_slot(x) for x in t.outputs))
            + _field(3, transform_identity(t.logic))
        )
        return _field(1, s.label) + _repeated(2, inputs) + _field(3, transform)

    return _repeated(1, (step(s) for s in p.steps))


def transform_identity(logic) -> bytes:
    """Deterministic byte serialization of a transform's logic.

    Logic classes from other backends may provide ``identity_bytes()``;
    they are wrapped under their class name so they cannot alias the
    built-in variants.
    """
    if isinstance(logic, ArgumentLogic):
        return _field(100, _field(1, logic.name) + _field(2, encode_resource(logic.resource)))
    if isinstance(logic, ReturnLogic):
        return _field(200, _field(1, logic.name) + _field(2, encode_resource(logic.resource)))
    if isinstance(logic, ContainerLogic):
        return _field(300, _encode_container(logic))
    if isinstance(logic, SubpipelineLogic):
        pairs = lambda ps: (_field(1, a) + _field(2, b) for a, b in sorted(ps))  # noqa: E731
        body = (
            _field(1, encode_pipeline(logic.pipeline))
            + _repeated(2, pairs(logic.arguments))
            + _repeated(3, pairs(logic.returns))
        )
        return _field(400, body)
    custom = getattr(logic, "identity_bytes", None)
    if custom is None:
        raise TypeError(f"no identity encoding for {type(logic).__name__}")
    return _field(1000, _lp(type(logic).__name__) + _lp(custom()))


# -- causal hashes -----------------------------------------------------------


def causal_hash_output(
    input_hashes: Union[Mapping[str, CausalHash], Iterable[tuple[str, CausalHash]]],
    identity: bytes,
    output_name: str,
) -> CausalHash:
    pairs = list(input_hashes.items() if isinstance(input_hashes, Mapping) else input_hashes)
    names = [n for n, _ in pairs]
    if len(set(names)) != len(names):
        raise errors.DuplicateInputName(f"duplicate input names in {sorted(names)}")
    pairs.sort(key=lambda p: p[0].encode("utf-8"))
    h = hashlib.sha256(CAUSAL_TAG)
    h.update(_u64(len(pairs)))
    for name, value in pairs:
        h.update(_lp(name) + value.digest)
    h.update(_lp(identity))
    h.update(_lp(output_name))
    return CausalHash(h.digest())


@dataclass(frozen=True)
class TraceEntry:
    """One edge; ``preimage_length`` is 0 where the caller supplied the hash."""

    scope: str
    edge: str
    preimage_length: int
    hash: CausalHash


@dataclass
class HashTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [
            {"scope": e.scope, "edge": e.edge, "preimage_length": e.preimage_length, "hash": e.hash.hex}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, data: list[dict]) -> "HashTrace":
        return cls([
            TraceEntry(d["scope"], d["edge"], d["preimage_length"], CausalHash.from_hex(d["hash"]))
            for d in data
        ])

    def for_scope(self, scope: str) -> dict[str, CausalHash]:
        return {e.edge: e.hash for e in self.entries if e.scope == scope}


def _preimage_length(inputs: Mapping[str, CausalHash], identity: bytes, output: str) -> int:
    n = len(CAUSAL_TAG) + 8
    n += sum(8 + len(k.encode("utf-8")) + 32 for k in inputs)
    return n + 8 + len(identity) + 8 + len(output.encode("utf-8"))


def output_hashes(
    graph: DependencyGraph,
    argument_hashes: Mapping[str, CausalHash],
    trace: HashTrace | None = None,
    scope: str = "",
) -> dict[tuple[str, str], CausalHash]:
    """Causal hash of every ``(step label, output name)`` slot in ``graph``."""
    arguments = graph.pipeline.arguments()
    for name in argument_hashes:
        if name not in arguments:
            raise errors.UnknownArgument(f"pipeline has no argument {name!r}")
    for name in arguments:
        if name not in argument_hashes:
            raise errors.MissingArgumentHash(f"no hash supplied for argument {name!r}")

    slots: dict[tuple[str, str], CausalHash] = {}
    preimage: dict[tuple[str, str], int] = {}
    for label in graph.order:
        step = graph.steps[label]
        logic = step.transform.logic
        if isinstance(logic, ReturnLogic):
            continue
        if isinstance(logic, ArgumentLogic):
            slots[(label, step.transform.outputs[0].name)] = argument_hashes[logic.name]
            continue
        inputs = {e.input: slots[(e.provider, e.output)] for e in graph.in_edges(label)}
        if isinstance(logic, SubpipelineLogic):
            inner_args = {inner: inputs[outer] for inner, outer in logic.arguments}
            inner = output_hashes(graph.subgraphs[label], inner_args, trace, f"{scope}{label}/")
            inner_returns = graph.subgraphs[label].pipeline.returns()
            for inner_name, outer in logic.returns:
                src = inner_returns[inner_name].inputs[0]
                slots[(label, outer)] = inner[(src.provider_step_label, src.provider_output_name)]
            continue
        identity = transform_identity(logic)
        for out in step.transform.outputs:
            slots[(label, out.name)] = causal_hash_output(inputs, identity, out.name)
            preimage[(label, out.name)] = _preimage_length(inputs, identity, out.name)

    if trace is not None:
        for e in graph.edges:
            key = (e.provider, e.output)
            trace.entries.append(TraceEntry(scope, str(e), preimage.get(key, 0), slots[key]))
    return slots


def hash_pipeline(
    graph: DependencyGraph, argument_hashes: Mapping[str, CausalHash]
) -> tuple[dict[Edge, CausalHash], HashTrace]:
    """Assign every edge of ``graph`` the causal hash of its provider slot."""
    trace = HashTrace()
    slots = output_hashes(graph, argument_hashes, trace)
    return {e: slots[(e.provider, e.output)] for e in graph.edges}, trace
