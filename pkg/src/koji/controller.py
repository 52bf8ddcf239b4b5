"""Pipeline controller: per-edge state cells and per-step supervisors.

Every dependency edge carries two cells, *available* and *needed*.  The run
orchestrator marks return-step inputs needed and argument outputs available,
then starts one supervisor per intermediate step.  A supervisor is two
threads:

* the driver waits until one of its outputs is needed but unavailable, tries
  the cache under per-hash locks, otherwise requests its inputs, waits for
  them, runs the transform and publishes what it produced;
* the collector kills the running process once no output still needs it.

All cells share one condition variable per run; waits are predicate waits on
that condition, not polling loops.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import socket
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Union

from . import errors
from .backends.base import (
    AttemptContext,
    Backend,
    ProcessHandle,
    Termination,
    reserve_port,
    split_endpoint,
)
from .cache import DIRECTORY, FILE, CacheStore, LockGuard, _make_readonly
from .hashing import CausalHash, HashTrace, output_hashes
from .model import (
    DependencyGraph,
    Edge,
    Pipeline,
    Resource,
    Step,
    SubpipelineLogic,
    build_graph,
    validate_document,
)
from .typecheck import check_pipeline

log = logging.getLogger(__name__)

DELIVERED = "Delivered"
FAILED_EXHAUSTED = "FailedExhausted"
ABORTED = "Aborted"


@dataclass
class RunConfig:
    max_attempts: Optional[int] = 3  # None retries forever
    retry_backoff: float = 1.0  # seconds, multiplied by the failure count
    readiness_probe: bool = False
    probe_timeout: float = 10.0
    cache_enabled: bool = True
    lock_timeout: Optional[float] = None
    kill_grace: float = 5.0
    run_dir: Optional[Path] = None

    def __post_init__(self):
        if self.max_attempts is not None and self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


@dataclass(frozen=True)
class Binding:
    """A pipeline argument value: a path (or host:port) and its hash."""

    locator: str
    hash: CausalHash


# -- report ------------------------------------------------------------------


@dataclass
class AttemptRecord:
    attempt: int
    termination: str
    reason: Optional[str] = None
    started: float = 0.0
    ended: float = 0.0
    executed: bool = False
    inner: Optional["RunReport"] = None


@dataclass
class StepReport:
    label: str
    attempts: list[AttemptRecord] = field(default_factory=list)
    executions: int = 0
    cache: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def terminations(self) -> list[str]:
        return [a.termination for a in self.attempts]


@dataclass
class ReturnRecord:
    name: str
    location: str
    hash: str
    kind: str


@dataclass
class RunReport:
    status: str = ""
    failed_step: Optional[str] = None
    reason: Optional[str] = None
    steps: dict[str, StepReport] = field(default_factory=dict)
    returns: dict[str, ReturnRecord] = field(default_factory=dict)
    run_dir: str = ""
    started: float = 0.0
    ended: float = 0.0
    events: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def delivered(self) -> bool:
        return self.status == DELIVERED

    def executions(self) -> dict[str, int]:
        return {label: s.executions for label, s in self.steps.items()}

    def total_executions(self) -> int:
        """Process starts in this run and every nested subpipeline run."""
        total = 0
        for s in self.steps.values():
            total += s.executions
            total += sum(a.inner.total_executions() for a in s.attempts if a.inner)
        return total

    def check(self) -> "RunReport":
        if self.status == FAILED_EXHAUSTED:
            raise errors.StepExhausted(self.failed_step)
        if self.status == ABORTED:
            raise errors.RunAborted("run aborted")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: Union[str, os.PathLike]) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)


# -- state cells -------------------------------------------------------------


class EdgeState:
    """The available/needed pair for one edge, guarded by the run condition."""

    __slots__ = ("edge", "hash", "available", "needed", "locator")

    def __init__(self, edge: Edge, hash: CausalHash):
        self.edge = edge
        self.hash = hash
        self.available = False
        self.needed = False
        self.locator: Optional[str] = None

    def __repr__(self) -> str:
        a = "A" if self.available else "-"
        n = "N" if self.needed else "-"
        return f"<{self.edge} {a}{n}>"


def _copy_payload(src: Path, dest: Path) -> None:
    if dest.is_dir() and not dest.is_symlink():
        shutil.rmtree(dest)
    elif dest.exists() or dest.is_symlink():
        dest.unlink()
    dest.parent.mkdir(parents=True, exist_ok=True)
    if src.is_dir():
        shutil.copytree(src, dest, copy_function=shutil.copyfile)
    else:
        shutil.copyfile(src, dest)


def _safe_name(label: str) -> str:
    return label.replace(os.sep, "_") or "_"


# -- supervisor --------------------------------------------------------------


class Supervisor:
    def __init__(self, ctl: "Controller", step: Step):
        self.ctl = ctl
        self.step = step
        self.label = step.label
        self.logic = step.transform.logic
        self.is_subpipeline = isinstance(self.logic, SubpipelineLogic)
        self.inputs: dict[str, EdgeState] = {}
        self.outputs: dict[str, list[EdgeState]] = {o.name: [] for o in step.transform.outputs}
        self.out_res = {o.name: o.resource for o in step.transform.outputs}
        self.in_res = {i.name: i.resource for i in step.transform.inputs}
        self.out_hash = {o.name: ctl.slot_hashes.get((step.label, o.name)) for o in step.transform.outputs}
        self.file_outputs = [n for n, r in self.out_res.items() if r.is_file]
        self.service_outputs = [n for n, r in self.out_res.items() if r.is_service]
        self.handle: Optional[ProcessHandle] = None
        self.kill_sent = False
        self.idle = False
        self.driver_done = False
        self.attempt = 0
        self.failures = 0
        self.report = StepReport(step.label)
        self._threads: list[threading.Thread] = []

    # -- predicates (call with the run condition held) -----------------------

    def _out_edges(self, names):
        return [e for n in names for e in self.outputs[n]]

    def wanted(self) -> bool:
        return any(e.needed and not e.available for es in self.outputs.values() for e in es)

    def inputs_ready(self) -> bool:
        return all(e.available for e in self.inputs.values())

    def should_kill(self) -> bool:
        if self.handle is None or self.kill_sent:
            return False
        if self.ctl.stopping:
            return True
        files_done = all((e.needed and e.available) or not e.needed
                         for e in self._out_edges(self.file_outputs))
        services_unneeded = all(not e.needed for e in self._out_edges(self.service_outputs))
        return files_done and services_unneeded

    def _set_inputs_needed(self, value: bool) -> None:
        for e in self.inputs.values():
            e.needed = value
        self.ctl.cond.notify_all()

    def _set_available(self, names, value: bool, locators: Mapping[str, str] = None) -> None:
        for n in names:
            for e in self.outputs[n]:
                e.available = value
                e.locator = locators[n] if value else None
        self.ctl.cond.notify_all()

    # -- threads -------------------------------------------------------------

    def start(self) -> None:
        for target, kind in ((self._drive, "driver"), (self._collect, "collector")):
            t = threading.Thread(target=target, name=f"{self.ctl.scope}{self.label}-{kind}", daemon=True)
            self._threads.append(t)
            t.start()

    def join(self) -> None:
        for t in self._threads:
            t.join()

    def _collect(self) -> None:
        cond = self.ctl.cond
        with cond:
            while True:
                cond.wait_for(lambda: self.driver_done or self.should_kill())
                if not self.should_kill():
                    return
                handle, self.kill_sent = self.handle, True
                cond.release()
                try:
                    log.debug("collecting %s%s", self.ctl.scope, self.label)
                    handle.kill()
                finally:
                    cond.acquire()

    def _drive(self) -> None:
        t0 = time.monotonic()
        try:
            while self._round():
                pass
        except Exception as err:  # never let one step take the run down silently
            log.exception("supervisor for %s crashed", self.label)
            self.ctl._exhausted(self.label, f"internal error: {err}")
        finally:
            with self.ctl.cond:
                self.driver_done = True
                self.idle = True
                self.report.wall_time = time.monotonic() - t0
                self.ctl.cond.notify_all()

    def _round(self) -> bool:
        ctl, cond = self.ctl, self.ctl.cond
        with cond:
            self.idle = True
            cond.notify_all()
            cond.wait_for(lambda: ctl.stopping or self.wanted())
            if ctl.stopping:
                return False
            self.idle = False

        guards: list[LockGuard] = []
        try:
            try:
                if self._from_cache(guards):
                    return True
            except errors.LockCancelled:
                return False
            except errors.LockTimeout as err:
                return self._failed(Termination.failed(f"LockTimeout: {err}"))

            with cond:
                self._set_inputs_needed(True)
                cond.wait_for(lambda: ctl.stopping or self.inputs_ready())
                if ctl.stopping:
                    self._set_inputs_needed(False)
                    return False

            term, locators = self._run_attempt()
            if term.ok:
                try:
                    locators = self._publish(locators, guards)
                except (errors.CacheError, OSError) as err:
                    return self._failed(Termination.failed(f"publish failed: {err}"))
                with cond:
                    self._set_available(self.file_outputs, True, locators)
                    self._set_inputs_needed(False)
                return True
            if term.kind == "killed":
                with cond:
                    self._set_inputs_needed(False)
                return True
            return self._failed(term)
        finally:
            for g in guards:
                g.release()

    def _failed(self, term: Termination) -> bool:
        ctl = self.ctl
        self.failures += 1
        log.info("%s%s attempt failed (%d): %s", ctl.scope, self.label, self.failures, term.reason)
        limit = ctl.config.max_attempts
        with ctl.cond:
            if limit is not None and self.failures >= limit:
                self._set_inputs_needed(False)
                ctl._exhausted(self.label, term.reason)
                return False
            # Inputs stay needed between attempts so services they use stay up.
            ctl.cond.wait_for(lambda: ctl.stopping, timeout=ctl.config.retry_backoff * self.failures)
        return True

    def _from_cache(self, guards: list[LockGuard]) -> bool:
        ctl = self.ctl
        if ctl.store is None or not self.file_outputs:
            return False
        if not self.is_subpipeline:
            for h in sorted({self.out_hash[n] for n in self.file_outputs}):
                guards.append(ctl.store.acquire(
                    h, timeout=ctl.config.lock_timeout, cancel=lambda: ctl.stopping))
        entries = {n: ctl.store.lookup(self.out_hash[n]) for n in self.file_outputs}
        for n, entry in entries.items():
            self.report.cache[n] = "hit" if entry is not None else "miss"
        if self.service_outputs or any(e is None for e in entries.values()):
            return False
        with ctl.cond:
            self._set_available(self.file_outputs, True, {n: str(e.payload) for n, e in entries.items()})
        ctl.event("cache-hit", self.label)
        return True

    def _publish(self, produced: Mapping[str, str], guards: list[LockGuard]) -> dict[str, str]:
        ctl = self.ctl
        by_key = {g.key: g for g in guards}
        locators = {}
        for n in self.file_outputs:
            src = Path(produced[n])
            kind = DIRECTORY if self.out_res[n].file.directory else FILE
            if (kind == DIRECTORY) != src.is_dir():
                raise errors.KindMismatch(f"output {n!r} is not a {kind}")
            key = self.out_hash[n]
            if ctl.store is not None and key in by_key:
                locators[n] = str(ctl.store.publish(key, src, kind, by_key[key]).payload)
            else:
                locators[n] = str(src)
        return locators

    def _run_attempt(self) -> tuple[Termination, dict[str, str]]:
        ctl, cond = self.ctl, self.ctl.cond
        n = self.attempt
        self.attempt += 1
        adir = ctl.run_dir / _safe_name(self.label) / str(n)
        (adir / "work").mkdir(parents=True, exist_ok=True)
        with cond:
            inputs = {name: e.locator for name, e in self.inputs.items()}
        record = AttemptRecord(n, "", started=time.time())
        self.report.attempts.append(record)
        try:
            destinations = {}
            for name, res in self.out_res.items():
                destinations[name] = reserve_port() if res.is_service else str(adir / "out" / name)
            ctx = AttemptContext(
                step=f"{ctl.scope}{self.label}",
                attempt=n,
                directory=adir,
                input_resources=self.in_res,
                output_resources=self.out_res,
                input_hashes={name: e.hash for name, e in self.inputs.items()},
                grace=ctl.config.kill_grace,
                inputs_available=self._inputs_available_now,
            )
            backend = ctl.subpipelines if self.is_subpipeline else ctl.backend
            handle = backend.execute(self.logic, inputs, destinations, ctx)
        except errors.BackendError as err:
            term = Termination.failed(f"{err.code}: {err}")
            record.termination, record.reason, record.ended = term.kind, term.reason, time.time()
            return term, {}

        record.executed = not self.is_subpipeline
        if record.executed:
            self.report.executions += 1
        ctl.event("spawn", self.label)
        with cond:
            self.handle, self.kill_sent = handle, False
            cond.notify_all()
        if self.service_outputs:
            if ctl.config.readiness_probe:
                self._probe(handle, [destinations[s] for s in self.service_outputs])
            with cond:
                self._set_available(self.service_outputs, True, destinations)

        term = handle.wait()
        with cond:
            self.handle = None
            if self.service_outputs:
                self._set_available(self.service_outputs, False)
        record.termination, record.reason, record.ended = term.kind, term.reason, time.time()
        record.inner = getattr(handle, "report", None)
        return term, destinations

    def _inputs_available_now(self) -> bool:
        with self.ctl.cond:
            return self.inputs_ready()

    def _probe(self, handle: ProcessHandle, endpoints: list[str]) -> None:
        deadline = time.monotonic() + self.ctl.config.probe_timeout
        pending = list(endpoints)
        while pending and not handle.done and not self.kill_sent and time.monotonic() < deadline:
            try:
                with socket.create_connection(split_endpoint(pending[0]), timeout=0.2):
                    pending.pop(0)
                    continue
            except OSError:
                time.sleep(0.01)
        if pending:
            log.warning("%s: readiness probe gave up on %s", self.label, pending)


# -- subpipeline adapter -----------------------------------------------------


class SubpipelineHandle(ProcessHandle):
    """Runs an inner pipeline on a thread and looks like one process."""

    def __init__(self, inner: "Controller", logic: SubpipelineLogic, outputs, ctx: AttemptContext):
        self.inner = inner
        self.logic = logic
        self.outputs = dict(outputs)
        self.attempt_id = ctx.attempt_id
        self.report: Optional[RunReport] = None
        self._error: Optional[BaseException] = None
        self._killed = False
        self._result: Optional[Termination] = None
        self._thread = threading.Thread(target=self._main, name=f"sub-{ctx.attempt_id}", daemon=True)
        self._thread.start()

    def _main(self) -> None:
        try:
            self.report = self.inner.run()
        except Exception as err:
            self._error = err

    @property
    def done(self) -> bool:
        return not self._thread.is_alive()

    def kill(self) -> None:
        self._killed = True
        self.inner.abort()

    def wait(self) -> Termination:
        self._thread.join()
        if self._result is None:
            self._result = self._outcome()
        return self._result

    def _outcome(self) -> Termination:
        if self._error is not None:
            return Termination.failed(f"inner pipeline error: {self._error}")
        if self.report.status == DELIVERED:
            for inner_name, outer in self.logic.returns:
                dest = Path(self.outputs[outer])
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(self.inner.output_dir / inner_name, dest)
            return Termination.succeeded()
        if self.report.status == ABORTED and self._killed:
            return Termination.killed()
        return Termination.failed(f"inner step {self.report.failed_step!r} exhausted")


class SubpipelineBackend(Backend):
    def __init__(self, ctl: "Controller"):
        self.ctl = ctl

    def execute(self, logic, inputs, outputs, ctx: AttemptContext) -> SubpipelineHandle:
        if any(r.is_service for r in ctx.output_resources.values()):
            raise errors.SpawnFailure("subpipelines cannot return services")
        bindings = {inner: Binding(inputs[outer], ctx.input_hashes[outer])
                    for inner, outer in logic.arguments}
        inner = Controller(
            logic.pipeline,
            bindings,
            ctx.directory / "returns",
            config=replace(self.ctl.config, run_dir=ctx.directory / "inner"),
            backend=self.ctl.backend,
            store=self.ctl.store,
            scope=f"{ctx.step}/",
        )
        return SubpipelineHandle(inner, logic, outputs, ctx)


# -- controller --------------------------------------------------------------


class Controller:
    """One pipeline run.  Call :meth:`run` once; :meth:`abort` from anywhere."""

    def __init__(
        self,
        pipeline: Pipeline,
        bindings: Mapping[str, Union[Binding, tuple]],
        output_dir: Union[str, os.PathLike],
        config: Optional[RunConfig] = None,
        backend: Optional[Backend] = None,
        store: Optional[CacheStore] = None,
        scope: str = "",
    ):
        self.pipeline = pipeline
        self.bindings = {k: v if isinstance(v, Binding) else Binding(str(v[0]), v[1])
                         for k, v in bindings.items()}
        self.output_dir = Path(output_dir)
        self.config = config or RunConfig()
        if backend is None:
            from .backends.local import LocalBackend
            backend = LocalBackend()
        self.backend = backend
        self.subpipelines = SubpipelineBackend(self)
        self.store = store if self.config.cache_enabled else None
        self.scope = scope
        self.cond = threading.Condition()
        self.stopping = False
        self.report = RunReport()
        self._aborted = threading.Event()
        self._seq = 0
        self._event_lock = threading.Lock()
        self.slot_hashes: dict[tuple[str, str], CausalHash] = {}
        self.graph: Optional[DependencyGraph] = None
        self.trace: Optional[HashTrace] = None
        self.run_dir: Optional[Path] = None

    # -- instrumentation -----------------------------------------------------

    def event(self, kind: str, detail: str = "") -> None:
        with self._event_lock:
            self._seq += 1
            self.report.events.append((self._seq, kind, detail))

    # -- control -------------------------------------------------------------

    def abort(self) -> None:
        """Request teardown; safe to call from signal handlers and other threads."""
        self._aborted.set()

    def _exhausted(self, label: str, reason: Optional[str]) -> None:
        with self.cond:
            if self.report.failed_step is None:
                self.report.failed_step = label
                self.report.reason = reason
            self.cond.notify_all()

    def _check(self) -> DependencyGraph:
        problems = [d for d in validate_document(self.pipeline) if d.severity == "error"]
        if problems:
            raise errors.ValidationFailed(problems)
        graph = build_graph(self.pipeline)
        mistyped = check_pipeline(graph)
        if mistyped:
            raise errors.TypeCheckFailed(mistyped)
        arguments = self.pipeline.arguments()
        missing = sorted(set(arguments) - set(self.bindings))
        if missing:
            raise errors.MissingArgument(f"no binding for argument(s): {', '.join(missing)}")
        unknown = sorted(set(self.bindings) - set(arguments))
        if unknown:
            raise errors.UnknownArgument(f"pipeline has no argument(s): {', '.join(unknown)}")
        return graph

    def _stage_argument(self, name: str, binding: Binding, resource: Resource) -> str:
        if resource.is_service:
            return binding.locator
        src = Path(binding.locator)
        if not src.exists():
            raise errors.MissingArgument(f"argument {name!r}: {src} does not exist")
        dest = self.run_dir / "_arguments" / name
        _copy_payload(src, dest)
        _make_readonly(dest)
        return str(dest)

    def run(self) -> RunReport:
        graph = self._check()
        self.graph = graph
        report = self.report
        report.started = time.time()

        # All causal hashes exist before anything executes.
        self.trace = HashTrace()
        self.slot_hashes = output_hashes(
            graph, {k: b.hash for k, b in self.bindings.items()}, self.trace)
        self.event("hashed", str(len(self.slot_hashes)))

        self.run_dir = Path(self.config.run_dir or tempfile.mkdtemp(prefix="koji-run-")).absolute()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        report.run_dir = str(self.run_dir)
        (self.run_dir / "hashes.json").write_text(json.dumps(self.trace.to_json(), indent=2) + "\n")

        states = {e: EdgeState(e, self.slot_hashes[(e.provider, e.output)]) for e in graph.edges}
        supervisors = {label: Supervisor(self, step) for label, step in graph.steps.items()
                       if step.is_intermediate}
        for e, st in states.items():
            if e.consumer in supervisors:
                supervisors[e.consumer].inputs[e.input] = st
            if e.provider in supervisors:
                supervisors[e.provider].outputs[e.output].append(st)
        for sup in supervisors.values():
            report.steps[sup.label] = sup.report

        return_edges = {graph.steps[e.consumer].transform.logic.name: st
                        for e, st in states.items() if graph.steps[e.consumer].is_return}
        staged: dict[str, str] = {}
        with self.cond:
            for e, st in states.items():
                provider = graph.steps[e.provider]
                if provider.is_argument:
                    name = provider.transform.logic.name
                    if name not in staged:
                        staged[name] = self._stage_argument(name, self.bindings[name], e.resource)
                    st.locator = staged[name]
                    st.available = True
            for st in return_edges.values():
                st.needed = True

        for sup in supervisors.values():
            sup.start()
        try:
            self._orchestrate(supervisors, return_edges)
        finally:
            with self.cond:
                self.stopping = True
                self.cond.notify_all()
            for sup in supervisors.values():
                sup.join()
            report.ended = time.time()
            report.write(self.run_dir / "report")
        log.info("%srun %s: %s", self.scope, self.run_dir, report.status)
        return report

    def _wait(self, predicate) -> None:
        # Aborts arrive through an Event (signal-handler safe), hence the timeout.
        with self.cond:
            while not predicate():
                if self._aborted.is_set():
                    return
                self.cond.wait(0.05)

    def _orchestrate(self, supervisors: dict[str, Supervisor], return_edges: dict[str, EdgeState]):
        report = self.report
        self._wait(lambda: report.failed_step is not None
                   or all(st.available for st in return_edges.values()))
        with self.cond:
            delivered = (report.failed_step is None and not self._aborted.is_set()
                         and all(st.available for st in return_edges.values()))
            ready = {name: (st.locator, st.edge.resource, st.hash) for name, st in return_edges.items()}

        if delivered:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            for name, (locator, res, h) in sorted(ready.items()):
                if res.is_file:
                    dest = self.output_dir / name
                    _copy_payload(Path(locator), dest)
                    report.returns[name] = ReturnRecord(name, str(dest), h.hex, "file")
                else:
                    report.returns[name] = ReturnRecord(name, locator, h.hex, "service")
            report.status = DELIVERED
            self.event("delivered")
        elif report.failed_step is not None:
            report.status = FAILED_EXHAUSTED
        else:
            report.status = ABORTED

        with self.cond:
            for st in return_edges.values():
                st.needed = False
            if not delivered:
                self.stopping = True
            self.cond.notify_all()
        if delivered:
            # Collectors tear down services once nothing needs them.
            self._wait(lambda: all(s.idle or s.driver_done for s in supervisors.values()))


def run(
    pipeline: Pipeline,
    bindings: Mapping[str, Union[Binding, tuple]],
    output_dir: Union[str, os.PathLike],
    config: Optional[RunConfig] = None,
    backend: Optional[Backend] = None,
    store: Optional[CacheStore] = None,
) -> RunReport:
    """Execute ``pipeline`` and deliver its returns into ``output_dir``."""
    return Controller(pipeline, bindings, output_dir, config, backend, store).run()
