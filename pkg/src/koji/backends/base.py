"""Backend interface: run one step attempt as a killable process."""

from __future__ import annotations

import socket
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

from ..errors import PortUnavailable
from ..hashing import CausalHash
from ..model import Resource

SUCCEEDED = "succeeded"
FAILED = "failed"
KILLED = "killed"

# input name -> absolute path or host:port
ResolvedInputs = Mapping[str, str]
# output name -> fresh absolute path or reserved host:port
OutputDestinations = Mapping[str, str]


@dataclass(frozen=True)
class Termination:
    kind: str
    reason: Optional[str] = None

    @classmethod
    def succeeded(cls) -> "Termination":
        return cls(SUCCEEDED)

    @classmethod
    def failed(cls, reason: str) -> "Termination":
        return cls(FAILED, reason)

    @classmethod
    def killed(cls) -> "Termination":
        return cls(KILLED)

    @property
    def ok(self) -> bool:
        return self.kind == SUCCEEDED


@dataclass
class AttemptContext:
    """Everything a backend may need beyond logic, inputs and outputs."""

    step: str
    attempt: int
    directory: Path
    input_resources: Mapping[str, Resource] = field(default_factory=dict)
    output_resources: Mapping[str, Resource] = field(default_factory=dict)
    input_hashes: Mapping[str, CausalHash] = field(default_factory=dict)
    grace: float = 5.0
    inputs_available: Optional[Callable[[], bool]] = None

    @property
    def attempt_id(self) -> str:
        return f"{self.step}#{self.attempt}"

    @property
    def workdir(self) -> Path:
        return self.directory / "work"

    @property
    def stdout_log(self) -> Path:
        return self.directory / "stdout.log"

    @property
    def stderr_log(self) -> Path:
        return self.directory / "stderr.log"


class ProcessHandle(ABC):
    attempt_id: str

    @abstractmethod
    def wait(self) -> Termination:
        """Block until the process ends; idempotent."""

    @abstractmethod
    def kill(self) -> None:
        """Stop the process; a later ``wait`` reports ``killed``."""

    @property
    @abstractmethod
    def done(self) -> bool:
        ...


class Backend(ABC):
    @abstractmethod
    def execute(self, logic, inputs: ResolvedInputs, outputs: OutputDestinations,
                ctx: AttemptContext) -> ProcessHandle:
        ...


def reserve_port(host: str = "127.0.0.1") -> str:
    """Pick a free loopback port by binding to zero; returns ``host:port``."""
    try:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.bind((host, 0))
            return f"{host}:{s.getsockname()[1]}"
    except OSError as err:
        raise PortUnavailable(str(err)) from err


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host, int(port)


def missing_outputs(outputs: OutputDestinations, ctx: AttemptContext) -> list[str]:
    """Declared file outputs that do not exist at their destination."""
    return sorted(
        name for name, dest in outputs.items()
        if ctx.output_resources.get(name, Resource.of_file()).is_file and not Path(dest).exists()
    )


def check_outputs(outputs: OutputDestinations, ctx: AttemptContext) -> Termination:
    missing = missing_outputs(outputs, ctx)
    if missing:
        return Termination.failed("MissingOutput: " + ", ".join(missing))
    return Termination.succeeded()
