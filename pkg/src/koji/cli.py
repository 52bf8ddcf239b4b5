"""Command-line entry point.

Exit codes::

    0   success (run: Delivered)
    1   structural problem in the document (syntax, schema, graph)
    2   type errors
    3   argument binding errors
    4   a step exhausted its attempts
    5   run aborted (SIGINT / SIGTERM)
    64  usage error, including an unreadable document path
    74  cache store unusable or I/O failure
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import signal
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import errors
from .cache import CacheStore
from .controller import ABORTED, DELIVERED, Binding, Controller, RunConfig
from .documents import format_for, load_document
from .dot import to_dot
from .hashing import CausalHash, content_hash_path, hash_pipeline
from .model import Pipeline, build_graph, validate_document
from .typecheck import check_pipeline

EXIT_OK = 0
EXIT_STRUCTURE = 1
EXIT_TYPE = 2
EXIT_BINDING = 3
EXIT_EXHAUSTED = 4
EXIT_ABORTED = 5
EXIT_USAGE = 64
EXIT_IO = 74

_HEX64 = re.compile(r"[0-9a-f]{64}")


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for type errors
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _Exit(EXIT_USAGE)


def _err(line: str) -> None:
    print(line, file=sys.stderr)


# -- shared steps ------------------------------------------------------------


def _load(path: str, lenient: bool) -> Pipeline:
    """Parse, structurally validate and type check; exits on any error."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as err:
        _err(f"ERROR: Usage: cannot read {path}: {err.strerror}")
        raise _Exit(EXIT_USAGE)
    pipeline, diagnostics = load_document(data, format_for(p), strict=not lenient)
    for d in diagnostics:
        _err(str(d))
    if pipeline is None:
        raise _Exit(EXIT_STRUCTURE)
    problems = validate_document(pipeline)
    for d in problems:
        _err(str(d))
    if any(d.severity == "error" for d in problems):
        raise _Exit(EXIT_STRUCTURE)
    mistyped = check_pipeline(build_graph(pipeline))
    for d in mistyped:
        _err(str(d))
    if mistyped:
        raise _Exit(EXIT_TYPE)
    return pipeline


def parse_binding(text: str) -> tuple[str, str, Optional[str]]:
    """``name=path[:hash]``; a trailing ``:<64 hex>`` is taken as the hash."""
    name, sep, rest = text.partition("=")
    if not sep or not name or not rest:
        raise ValueError(f"expected NAME=PATH[:HASH], got {text!r}")
    head, colon, tail = rest.rpartition(":")
    if colon and head and _HEX64.fullmatch(tail):
        return name, head, tail
    return name, rest, None


def _bindings(pipeline: Pipeline, specs: Sequence[str], base: Path) -> dict[str, Binding]:
    arguments = pipeline.arguments()
    out: dict[str, Binding] = {}
    for spec in specs:
        try:
            name, locator, digest = parse_binding(spec)
        except ValueError as err:
            _err(f"ERROR: BindingSyntax: {err}")
            raise _Exit(EXIT_BINDING)
        if name in out:
            _err(f"ERROR: DuplicateBinding: argument {name!r} bound twice")
            raise _Exit(EXIT_BINDING)
        if name not in arguments:
            _err(f"ERROR: UnknownArgument: pipeline has no argument {name!r}")
            raise _Exit(EXIT_BINDING)
        resource = arguments[name].transform.outputs[0].resource
        if resource.is_file:
            locator = str((base / locator).absolute()) if not os.path.isabs(locator) else locator
        if digest is not None:
            h = CausalHash.from_hex(digest)
        elif resource.is_service:
            h = CausalHash.of(b"endpoint\0", locator.encode())
        else:
            try:
                h = content_hash_path(locator)
            except errors.HashError as err:
                _err(f"ERROR: {err.code}: argument {name!r}: {err}")
                raise _Exit(EXIT_BINDING)
            _err(f"note: argument {name} hash {h.hex}")
        out[name] = Binding(locator, h)
    missing = sorted(set(arguments) - set(out))
    if missing:
        _err(f"ERROR: MissingArgument: no binding for {', '.join(missing)}")
        raise _Exit(EXIT_BINDING)
    return out


def _store(path: Optional[str], required: bool) -> Optional[CacheStore]:
    path = path or os.environ.get("KOJI_CACHE")
    if not path:
        if required:
            _err("ERROR: Usage: no cache directory (use --cache or KOJI_CACHE)")
            raise _Exit(EXIT_USAGE)
        return None
    try:
        return CacheStore(path)
    except (errors.CacheError, OSError) as err:
        _err(f"ERROR: StoreUnavailable: {path}: {err}")
        raise _Exit(EXIT_IO)


# -- commands ----------------------------------------------------------------


def cmd_validate(args) -> int:
    _load(args.document, args.lenient)
    return EXIT_OK


def cmd_hash(args) -> int:
    pipeline = _load(args.document, args.lenient)
    bindings = _bindings(pipeline, args.arg, Path.cwd())
    edges, _ = hash_pipeline(build_graph(pipeline), {k: b.hash for k, b in bindings.items()})
    for edge, h in edges.items():
        print(f"{edge}  {h.hex}")
    return EXIT_OK


def cmd_graph(args) -> int:
    pipeline = _load(args.document, args.lenient)
    sys.stdout.write(to_dot(build_graph(pipeline), Path(args.document).stem))
    return EXIT_OK


def _backend(args, doc: Path):
    if args.backend == "mock":
        from .backends.mock import MockBackend, load_scripts
        scripts = {}
        if args.mock_script:
            try:
                data = yaml.safe_load(Path(args.mock_script).read_text()) or {}
                scripts = load_scripts(data)
            except OSError as err:
                _err(f"ERROR: Usage: cannot read {args.mock_script}: {err.strerror}")
                raise _Exit(EXIT_USAGE)
            except (ValueError, TypeError, AttributeError, yaml.YAMLError) as err:
                _err(f"ERROR: MockScript: {err}")
                raise _Exit(EXIT_USAGE)
        return MockBackend(scripts)
    if args.mock_script:
        _err("ERROR: Usage: --mock-script needs --backend mock")
        raise _Exit(EXIT_USAGE)
    from .backends.local import LocalBackend
    return LocalBackend(base_dir=doc.parent.absolute())


def cmd_run(args) -> int:
    doc = Path(args.document)
    pipeline = _load(args.document, args.lenient)
    bindings = _bindings(pipeline, args.arg, Path.cwd())
    store = _store(args.cache, required=False)
    config = RunConfig(
        max_attempts=args.max_attempts,
        retry_backoff=args.retry_backoff,
        readiness_probe=args.probe,
        cache_enabled=store is not None,
        kill_grace=args.kill_grace,
        run_dir=Path(args.run_dir) if args.run_dir else None,
    )
    ctl = Controller(pipeline, bindings, args.out, config, _backend(args, doc), store)

    def interrupt(signum, frame):
        ctl.abort()

    previous = {s: signal.signal(s, interrupt) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        report = ctl.run()
    except errors.MissingArgument as err:
        _err(f"ERROR: {err.code}: {err}")
        return EXIT_BINDING
    finally:
        for s, handler in previous.items():
            signal.signal(s, handler)

    print(f"status: {report.status}")
    print(f"report: {Path(report.run_dir) / 'report'}")
    for name, r in sorted(report.returns.items()):
        print(f"return {name}: {r.location}  {r.hash}")
    if report.status == DELIVERED:
        return EXIT_OK
    if report.status == ABORTED:
        return EXIT_ABORTED
    _err(f"ERROR: StepExhausted: step {report.failed_step!r}: {report.reason}")
    return EXIT_EXHAUSTED


def cmd_cache(args) -> int:
    store = _store(args.cache, required=True)
    if args.action == "stats":
        s = store.stats()
        print(f"count {s.count}")
        print(f"bytes {s.total_bytes}")
        return EXIT_OK
    if args.action == "verify":
        keys = None
        if args.key:
            keys = [_key(args.key)]
        bad = store.verify(keys[0]) if keys else store.verify()
        for k in bad:
            _err(f"ERROR: StoreCorrupt: {k.hex}")
        if bad:
            return EXIT_STRUCTURE
        print("ok")
        return EXIT_OK
    if not args.key:
        _err("ERROR: Usage: cache evict needs a KEY")
        raise _Exit(EXIT_USAGE)
    key = _key(args.key)
    with store.acquire(key) as guard:
        removed = store.evict(key, guard)
    print(f"{'evicted' if removed else 'absent'} {key.hex}")
    return EXIT_OK


def _key(text: str) -> CausalHash:
    if not _HEX64.fullmatch(text):
        _err(f"ERROR: Usage: not a 64-digit lowercase hex key: {text!r}")
        raise _Exit(EXIT_USAGE)
    return CausalHash.from_hex(text)


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koji", description="Run typed, cached dataflow pipelines.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def doc_command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("document")
        p.add_argument("--lenient", action="store_true", help="warn on unknown keys instead of failing")
        p.set_defaults(func=func)
        return p

    doc_command("validate", cmd_validate, "check structure and resource types")
    p = doc_command("hash", cmd_hash, "print the causal hash of every edge")
    p.add_argument("--arg", action="append", default=[], metavar="NAME=PATH[:HASH]")
    doc_command("graph", cmd_graph, "emit the dependency graph as DOT")

    p = doc_command("run", cmd_run, "execute a pipeline")
    p.add_argument("--arg", action="append", default=[], metavar="NAME=PATH[:HASH]")
    p.add_argument("--out", required=True, help="directory receiving return payloads")
    p.add_argument("--cache", help="cache store directory (default: $KOJI_CACHE)")
    p.add_argument("--max-attempts", type=_positive, default=3)
    p.add_argument("--retry-backoff", type=float, default=1.0, metavar="SECONDS")
    p.add_argument("--kill-grace", type=float, default=5.0, metavar="SECONDS")
    p.add_argument("--backend", choices=("local", "mock"), default="local")
    p.add_argument("--mock-script", help="YAML mapping step label -> behaviors")
    p.add_argument("--run-dir", help="per-run scratch and report directory")
    p.add_argument("--probe", action="store_true", help="wait for service ports to accept")

    p = sub.add_parser("cache", help="inspect or maintain a cache store")
    p.add_argument("action", choices=("stats", "evict", "verify"))
    p.add_argument("key", nargs="?")
    p.add_argument("--cache", help="cache store directory (default: $KOJI_CACHE)")
    p.set_defaults(func=cmd_cache)
    return parser


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except _Exit as e:
        return e.code
    except errors.CacheError as err:
        _err(f"ERROR: {err.code}: {err}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
