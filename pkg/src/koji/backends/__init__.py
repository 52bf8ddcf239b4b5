from .base import (
    AttemptContext,
    Backend,
    ProcessHandle,
    Termination,
    reserve_port,
)
from .local import LocalBackend, build_invocation
from .mock import Fail, MockBackend, MockLogic, ServeUntilKilled, Succeed, load_scripts, mock_script

__all__ = [
    "AttemptContext",
    "Backend",
    "Fail",
    "LocalBackend",
    "MockBackend",
    "MockLogic",
    "ProcessHandle",
    "ServeUntilKilled",
    "Succeed",
    "Termination",
    "build_invocation",
    "load_scripts",
    "mock_script",
    "reserve_port",
]
