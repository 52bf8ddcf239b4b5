"""Local-process backend: ``ContainerLogic.image`` names an executable."""

from __future__ import annotations

import logging
import os
import shutil
import signal
import subprocess
import threading
from pathlib import Path
from typing import Mapping, Optional

from ..errors import ImageNotFound, SpawnFailure, UnboundName
from ..model import ContainerLogic
from .base import (
    AttemptContext,
    Backend,
    OutputDestinations,
    ProcessHandle,
    ResolvedInputs,
    Termination,
    check_outputs,
)

log = logging.getLogger(__name__)


def build_invocation(
    logic: ContainerLogic, inputs: ResolvedInputs, outputs: OutputDestinations
) -> tuple[list[str], dict[str, str]]:
    """argv and extra environment for one container invocation.

    A binding with flag ``f`` adds ``--f=<locator>``; an empty flag passes the
    locator positionally.  Inputs come first, then outputs, then extra flags,
    each in declared order.
    """
    argv = [logic.image]
    env: dict[str, str] = {}
    for bindings, locators in ((logic.inputs, inputs), (logic.outputs, outputs)):
        for b in bindings:
            if b.name not in locators:
                raise UnboundName(f"no locator for {b.name!r}")
            loc = str(locators[b.name])
            if b.flag is not None:
                argv.append(f"--{b.flag}={loc}" if b.flag else loc)
            if b.env is not None:
                env[b.env] = loc
    for f in logic.flags:
        argv.append(f"--{f.name}" if f.value is None else f"--{f.name}={f.value}")
    for e in logic.env:
        env[e.name] = e.value if e.value is not None else ""
    return argv, env


class LocalHandle(ProcessHandle):
    def __init__(self, proc: subprocess.Popen, outputs, ctx: AttemptContext, logs):
        self.proc = proc
        self.attempt_id = ctx.attempt_id
        self._outputs = outputs
        self._ctx = ctx
        self._logs = logs
        self._killed = False
        self._result: Optional[Termination] = None
        self._lock = threading.Lock()

    @property
    def pid(self) -> int:
        return self.proc.pid

    @property
    def done(self) -> bool:
        return self.proc.poll() is not None

    def _signal(self, sig) -> None:
        try:
            os.killpg(self.proc.pid, sig)
        except ProcessLookupError:
            pass

    def kill(self) -> None:
        if self.proc.poll() is not None:
            return
        self._killed = True
        self._signal(signal.SIGTERM)
        try:
            self.proc.wait(self._ctx.grace)
        except subprocess.TimeoutExpired:
            self._signal(signal.SIGKILL)
            self.proc.wait()

    def wait(self) -> Termination:
        code = self.proc.wait()
        with self._lock:
            if self._result is None:
                for f in self._logs:
                    f.close()
                if self._killed:
                    self._result = Termination.killed()
                elif code == 0:
                    self._result = check_outputs(self._outputs, self._ctx)
                else:
                    self._result = Termination.failed(f"exit status {code}")
            return self._result


class LocalBackend(Backend):
    """Runs container logic as a local child process in its own session.

    Relative image paths containing a separator are resolved against
    ``base_dir``; bare names are looked up on ``PATH``.
    """

    def __init__(self, base_dir: Optional[os.PathLike] = None,
                 extra_env: Optional[Mapping[str, str]] = None):
        self.base_dir = Path(base_dir).absolute() if base_dir else None
        self.extra_env = dict(extra_env or {})

    def resolve_image(self, image: str) -> str:
        if os.sep in image:
            path = Path(image)
            if not path.is_absolute() and self.base_dir is not None:
                path = self.base_dir / path
            if path.is_file() and os.access(path, os.X_OK):
                return str(path.absolute())  # the process runs in its own workdir
            raise ImageNotFound(f"executable not found: {image}")
        found = shutil.which(image)
        if found is None:
            raise ImageNotFound(f"executable not found on PATH: {image}")
        return found

    def execute(self, logic, inputs, outputs, ctx: AttemptContext) -> LocalHandle:
        if not isinstance(logic, ContainerLogic):
            raise SpawnFailure(f"local backend cannot run {type(logic).__name__}")
        executable = self.resolve_image(logic.image)
        argv, env = build_invocation(logic, inputs, outputs)
        ctx.workdir.mkdir(parents=True, exist_ok=True)
        for dest, res in ((outputs[n], ctx.output_resources.get(n)) for n in outputs):
            if res is not None and res.is_file:
                Path(dest).parent.mkdir(parents=True, exist_ok=True)
        logs = [open(ctx.stdout_log, "wb"), open(ctx.stderr_log, "wb")]
        try:
            proc = subprocess.Popen(
                argv,
                executable=executable,
                env={**os.environ, **self.extra_env, **env},
                cwd=ctx.workdir,
                stdin=subprocess.DEVNULL,
                stdout=logs[0],
                stderr=logs[1],
                start_new_session=True,
            )
        except OSError as err:
            for f in logs:
                f.close()
            raise SpawnFailure(f"{logic.image}: {err}") from err
        log.debug("started %s pid=%d: %s", ctx.attempt_id, proc.pid, argv)
        return LocalHandle(proc, outputs, ctx, logs)
