"""Scripted in-process backend for deterministic tests.

Each step attempt consumes one behavior from its script: attempt ``i`` runs
``script[min(i, len(script) - 1)]``.  Scripts are looked up by step path
(``outer/inner`` for steps of a subpipeline), then by bare label; steps
without a script run :attr:`MockBackend.default`.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from ..errors import PortUnavailable
from .base import (
    AttemptContext,
    Backend,
    ProcessHandle,
    Termination,
    check_outputs,
    split_endpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Succeed:
    """Write outputs after ``delay`` seconds and exit cleanly.

    ``outputs`` maps output name to file content (a str) or, for directory
    outputs, to a mapping of file name to content.  Outputs not listed get
    default content derived from the step name and its file inputs.  Names
    in ``skip`` are not written at all.  With ``check_services`` the step
    keeps connecting to every service input while it runs and fails on the
    first refused connection.
    """

    outputs: tuple = ()
    delay: float = 0.0
    skip: tuple[str, ...] = ()
    check_services: bool = False

    def __post_init__(self):
        if isinstance(self.outputs, Mapping):
            object.__setattr__(self, "outputs", tuple(sorted(
                (k, tuple(sorted(v.items())) if isinstance(v, Mapping) else v)
                for k, v in self.outputs.items())))
        object.__setattr__(self, "skip", tuple(self.skip))


@dataclass(frozen=True)
class Fail:
    delay: float = 0.0
    reason: str = "scripted failure"


@dataclass(frozen=True)
class ServeUntilKilled:
    """Accept connections on every service output until killed."""

    ready_delay: float = 0.0


Behavior = Union[Succeed, Fail, ServeUntilKilled]


@dataclass(frozen=True)
class MockLogic:
    behaviors: tuple

    def identity_bytes(self) -> bytes:
        return json.dumps([behavior_to_dict(b) for b in self.behaviors], sort_keys=True).encode()


def mock_script(behaviors: Sequence[Behavior]) -> MockLogic:
    """Transform logic that runs ``behaviors`` on the mock backend."""
    if not behaviors:
        raise ValueError("a mock script needs at least one behavior")
    return MockLogic(tuple(behaviors))


def behavior_to_dict(b: Behavior) -> dict:
    if isinstance(b, Succeed):
        outputs = {k: dict(v) if isinstance(v, tuple) else v for k, v in b.outputs}
        return {"succeed": {"outputs": outputs, "delay": b.delay, "skip": list(b.skip),
                            "check_services": b.check_services}}
    if isinstance(b, Fail):
        return {"fail": {"delay": b.delay, "reason": b.reason}}
    return {"serve": {"ready_delay": b.ready_delay}}


def behavior_from_dict(d: Mapping) -> Behavior:
    if not isinstance(d, Mapping) or len(d) != 1:
        raise ValueError(f"behavior must be a one-key mapping, got {d!r}")
    (kind, args), = d.items()
    args = dict(args or {})
    if kind == "succeed":
        return Succeed(outputs=args.get("outputs") or {}, delay=float(args.get("delay", 0)),
                       skip=tuple(args.get("skip", ())),
                       check_services=bool(args.get("check_services", False)))
    if kind == "fail":
        return Fail(delay=float(args.get("delay", 0)), reason=args.get("reason", "scripted failure"))
    if kind == "serve":
        return ServeUntilKilled(ready_delay=float(args.get("ready_delay", 0)))
    raise ValueError(f"unknown mock behavior {kind!r}")


def load_scripts(data: Mapping) -> dict[str, list[Behavior]]:
    """Parse a mock-script document: ``{step label: [behavior, ...]}``."""
    scripts = {}
    for label, items in data.items():
        if isinstance(items, Mapping):
            items = [items]
        scripts[str(label)] = [behavior_from_dict(i) for i in items]
    return scripts


def _reachable(endpoint: str, timeout: float = 0.5) -> bool:
    try:
        with socket.create_connection(split_endpoint(endpoint), timeout=timeout) as s:
            s.recv(16)
        return True
    except OSError:
        return False


class MockHandle(ProcessHandle):
    def __init__(self, backend: "MockBackend", behavior: Behavior, inputs, outputs,
                 ctx: AttemptContext):
        self.backend = backend
        self.behavior = behavior
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)
        self.ctx = ctx
        self.attempt_id = ctx.attempt_id
        self._stop = threading.Event()
        self._sockets: list[socket.socket] = []
        self._result: Optional[Termination] = None
        if isinstance(behavior, ServeUntilKilled) and behavior.ready_delay == 0:
            self._bind()
        self._thread = threading.Thread(target=self._main, name=f"mock-{ctx.attempt_id}", daemon=True)

    def start(self) -> None:
        self._thread.start()

    @property
    def done(self) -> bool:
        return not self._thread.is_alive()

    def _service_outputs(self) -> list[str]:
        return [n for n in self.outputs if self.ctx.output_resources[n].is_service]

    def _bind(self) -> None:
        for name in self._service_outputs():
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind(split_endpoint(self.outputs[name]))
            except OSError as err:
                s.close()
                for other in self._sockets:
                    other.close()
                raise PortUnavailable(f"{self.outputs[name]}: {err}") from err
            s.listen(64)
            s.settimeout(0.05)
            self._sockets.append(s)

    def _main(self) -> None:
        try:
            self._result = self._behave()
        except Exception as err:  # a broken script must not hang the run
            log.exception("mock attempt %s crashed", self.attempt_id)
            self._result = Termination.failed(f"mock crashed: {err}")
        finally:
            for s in self._sockets:
                s.close()
            self.backend._finished(self)

    def _sleep(self, seconds: float) -> bool:
        """Sleep unless killed first; True when the full delay elapsed."""
        return not self._stop.wait(seconds)

    def _behave(self) -> Termination:
        b = self.behavior
        if isinstance(b, Fail):
            return Termination.failed(b.reason) if self._sleep(b.delay) else Termination.killed()
        if isinstance(b, ServeUntilKilled):
            if b.ready_delay:
                if not self._sleep(b.ready_delay):
                    return Termination.killed()
                self._bind()
            if not self._sockets:
                self._stop.wait()
            while not self._stop.is_set():
                for s in self._sockets:
                    try:
                        conn, _ = s.accept()
                    except (socket.timeout, OSError):
                        continue
                    with conn:
                        conn.sendall(b"ok\n")
            return Termination.killed()
        return self._succeed(b)

    def _succeed(self, b: Succeed) -> Termination:
        services = [self.inputs[n] for n in self.inputs if self.ctx.input_resources[n].is_service]
        deadline = time.monotonic() + b.delay
        while True:
            if b.check_services:
                for endpoint in services:
                    if not _reachable(endpoint):
                        self.backend._violation(f"{self.attempt_id}: service {endpoint} unreachable")
                        return Termination.failed(f"service {endpoint} unreachable")
            left = deadline - time.monotonic()
            if left <= 0:
                break
            if not self._sleep(min(left, 0.005) if b.check_services else left):
                return Termination.killed()
        if self._stop.is_set():
            return Termination.killed()
        explicit = dict(b.outputs)
        for name, dest in self.outputs.items():
            res = self.ctx.output_resources[name]
            if res.is_service or name in b.skip:
                continue
            content = explicit.get(name, self._default_content(name))
            dest = Path(dest)
            dest.parent.mkdir(parents=True, exist_ok=True)
            if res.file.directory:
                dest.mkdir(exist_ok=True)
                files = dict(content) if isinstance(content, tuple) else {"data": content}
                for fname, text in files.items():
                    (dest / fname).write_text(text)
            else:
                dest.write_text(content if isinstance(content, str) else json.dumps(dict(content)))
        return check_outputs(self.outputs, self.ctx)

    def _default_content(self, name: str) -> str:
        parts = [f"{self.ctx.step.rsplit('/', 1)[-1]}:{name}\n"]
        for inp in sorted(self.inputs):
            path = Path(self.inputs[inp])
            if self.ctx.input_resources[inp].is_file and path.is_file():
                parts.append(path.read_text())
        return "".join(parts)

    def kill(self) -> None:
        self._stop.set()
        for s in self._sockets:
            try:
                s.close()
            except OSError:
                pass

    def wait(self) -> Termination:
        self._thread.join()
        return self._result


class MockBackend(Backend):
    """Backend whose "processes" are scripted threads.

    Records, per step path, how many attempts were started and whether all
    inputs were available at spawn time.
    """

    def __init__(self, scripts: Optional[Mapping[str, Sequence[Behavior]]] = None,
                 default: Behavior = Succeed()):
        self.scripts = {k: list(v) for k, v in (scripts or {}).items()}
        self.default = default
        self.executions: Counter = Counter()
        self.spawns: list[tuple[str, int, bool]] = []
        self.violations: list[str] = []
        self._live: set[MockHandle] = set()
        self._lock = threading.Lock()

    def script_for(self, logic, step: str) -> list[Behavior]:
        if isinstance(logic, MockLogic):
            return list(logic.behaviors)
        for key in (step, step.rsplit("/", 1)[-1]):
            if key in self.scripts:
                return self.scripts[key]
        return [self.default]

    def execute(self, logic, inputs, outputs, ctx: AttemptContext) -> MockHandle:
        script = self.script_for(logic, ctx.step)
        behavior = script[min(ctx.attempt, len(script) - 1)]
        ready = ctx.inputs_available() if ctx.inputs_available else True
        handle = MockHandle(self, behavior, inputs, outputs, ctx)
        with self._lock:
            self.executions[ctx.step] += 1
            self.spawns.append((ctx.step, ctx.attempt, ready))
            if not ready:
                self.violations.append(f"{ctx.attempt_id}: spawned before inputs were available")
            self._live.add(handle)
        handle.start()
        return handle

    def _finished(self, handle: MockHandle) -> None:
        with self._lock:
            self._live.discard(handle)

    def _violation(self, message: str) -> None:
        with self._lock:
            self.violations.append(message)

    @property
    def live(self) -> int:
        with self._lock:
            return len(self._live)
