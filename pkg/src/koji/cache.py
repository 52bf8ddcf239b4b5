"""Content-addressed file store keyed by causal hash, with per-key locks.

On-disk layout (version 1)::

    <root>/version                      "1"
    <root>/objects/<2 hex>/<62 hex>/payload
    <root>/objects/<2 hex>/<62 hex>/meta    JSON record
    <root>/locks/<64 hex>.lock          advisory flock target
    <root>/staging/<pid>-<token>-<hex>/ in-flight publications

An object directory appears through a single ``rename`` of a fully written
staging directory, so readers either see a complete entry or nothing.
"""

from __future__ import annotations

import errno
import fcntl
import hashlib
import json
import logging
import os
import shutil
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Union

from . import errors
from .hashing import CausalHash, content_hash_path

log = logging.getLogger(__name__)

LAYOUT_VERSION = "1"
FILE = "file"
DIRECTORY = "directory"


@dataclass(frozen=True)
class CacheEntry:
    key: CausalHash
    kind: str
    payload: Path
    created_at: float
    size: int
    integrity: str


@dataclass(frozen=True)
class StoreStats:
    count: int
    total_bytes: int


class LockGuard:
    """Exclusive hold on one key; release is idempotent."""

    def __init__(self, store: "CacheStore", key: CausalHash, fd: int):
        self.store = store
        self.key = key
        self.token = uuid.uuid4().hex
        self._fd: Optional[int] = fd

    @property
    def held(self) -> bool:
        return self._fd is not None

    def release(self) -> None:
        fd, self._fd = self._fd, None
        if fd is not None:
            try:
                fcntl.flock(fd, fcntl.LOCK_UN)
            finally:
                os.close(fd)

    def __enter__(self) -> "LockGuard":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def __del__(self):
        self.release()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _tree_size(path: Path) -> int:
    if path.is_file():
        return path.stat().st_size
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())


def integrity_digest(path: Path, kind: str) -> str:
    if kind == FILE:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    return content_hash_path(path).hex


def _kind_of(path: Path) -> str:
    return DIRECTORY if path.is_dir() else FILE


def _make_readonly(path: Path) -> None:
    targets = [path] if path.is_file() else [p for p in path.rglob("*") if p.is_file()]
    for p in targets:
        p.chmod(0o444)


class CacheStore:
    def __init__(self, root: Union[str, os.PathLike]):
        self.root = Path(root).absolute()
        self.token = f"{os.getpid()}-{uuid.uuid4().hex[:12]}"
        try:
            for sub in ("objects", "locks", "staging"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)
            version = self.root / "version"
            if not version.exists():
                tmp = self.root / f".version.{self.token}"
                tmp.write_text(LAYOUT_VERSION + "\n")
                os.replace(tmp, version)
        except OSError as err:
            raise errors.StoreUnavailable(f"cannot open cache store at {self.root}: {err}") from err
        found = version.read_text().strip()
        if found != LAYOUT_VERSION:
            raise errors.StoreUnavailable(f"unsupported store layout version {found!r}")
        self.sweep_staging()

    def __repr__(self) -> str:
        return f"CacheStore({str(self.root)!r})"

    # -- paths ---------------------------------------------------------------

    def object_dir(self, key: CausalHash) -> Path:
        return self.root / "objects" / key.hex[:2] / key.hex[2:]

    def lock_path(self, key: CausalHash) -> Path:
        return self.root / "locks" / f"{key.hex}.lock"

    def sweep_staging(self) -> int:
        """Remove staging directories left behind by dead processes."""
        removed = 0
        for entry in (self.root / "staging").iterdir():
            pid = entry.name.split("-", 1)[0]
            if pid.isdigit() and _pid_alive(int(pid)):
                continue
            shutil.rmtree(entry, ignore_errors=True)
            removed += 1
        if removed:
            log.info("swept %d orphaned staging entries from %s", removed, self.root)
        return removed

    # -- locking -------------------------------------------------------------

    def acquire(
        self,
        key: CausalHash,
        timeout: Optional[float] = None,
        cancel: Optional[Callable[[], bool]] = None,
    ) -> LockGuard:
        """Block until this caller holds ``key`` exclusively.

        Exclusion holds between threads and between processes sharing the
        store directory.  ``cancel`` is polled while waiting; when it returns
        true the wait ends with :class:`LockCancelled`.
        """
        try:
            fd = os.open(self.lock_path(key), os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as err:
            raise errors.StoreUnavailable(f"cannot open lock for {key.hex}: {err}") from err
        if timeout is None and cancel is None:
            fcntl.flock(fd, fcntl.LOCK_EX)
            return LockGuard(self, key, fd)
        deadline = None if timeout is None else time.monotonic() + timeout
        pause = 0.001
        while True:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                return LockGuard(self, key, fd)
            except BlockingIOError:
                pass
            if cancel is not None and cancel():
                os.close(fd)
                raise errors.LockCancelled(key.hex)
            if deadline is not None and time.monotonic() >= deadline:
                os.close(fd)
                raise errors.LockTimeout(f"timed out waiting for lock {key.hex}")
            time.sleep(pause)
            pause = min(pause * 2, 0.05)

    def _check_guard(self, key: CausalHash, guard: Optional[LockGuard]) -> None:
        if guard is None or not guard.held or guard.key != key or guard.store.root != self.root:
            raise errors.NotHoldingLock(f"lock for {key.hex} is not held by the caller")

    # -- entries -------------------------------------------------------------

    def _read_entry(self, key: CausalHash, obj: Path) -> CacheEntry:
        try:
            meta = json.loads((obj / "meta").read_text())
        except (OSError, ValueError) as err:
            raise errors.StoreCorrupt(f"{key.hex}: unreadable meta record ({err})") from err
        payload = obj / "payload"
        if not payload.exists():
            raise errors.StoreCorrupt(f"{key.hex}: meta record without payload")
        return CacheEntry(key, meta["kind"], payload, meta["created_at"], meta["size"], meta["integrity"])

    def lookup(self, key: CausalHash) -> Optional[CacheEntry]:
        obj = self.object_dir(key)
        if not obj.exists():
            return None
        return self._read_entry(key, obj)

    def _stage(self, key: CausalHash, source: Path, kind: str) -> Path:
        staging = self.root / "staging" / f"{self.token}-{uuid.uuid4().hex[:8]}-{key.hex}"
        staging.mkdir()
        payload = staging / "payload"
        if kind == DIRECTORY:
            shutil.copytree(source, payload, symlinks=False)
        else:
            shutil.copyfile(source, payload)
        _make_readonly(payload)
        meta = {
            "key": key.hex,
            "kind": kind,
            "created_at": time.time(),
            "size": _tree_size(payload),
            "integrity": integrity_digest(payload, kind),
        }
        with open(staging / "meta", "w") as f:
            json.dump(meta, f, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        return staging

    def _commit(self, key: CausalHash, staging: Path) -> None:
        obj = self.object_dir(key)
        obj.parent.mkdir(exist_ok=True)
        os.rename(staging, obj)

    def publish(
        self,
        key: CausalHash,
        source: Union[str, os.PathLike],
        kind: str,
        guard: Optional[LockGuard],
    ) -> CacheEntry:
        """Copy ``source`` into the store under ``key``; a present key is left as is."""
        self._check_guard(key, guard)
        existing = self.lookup(key)
        if existing is not None:
            return existing
        source = Path(source)
        if not source.exists():
            raise errors.SourceMissing(f"nothing to publish at {source}")
        if kind not in (FILE, DIRECTORY):
            raise ValueError(f"unknown entry kind {kind!r}")
        if _kind_of(source) != kind:
            raise errors.KindMismatch(f"{source} is a {_kind_of(source)}, declared {kind}")
        staging = self._stage(key, source, kind)
        try:
            self._commit(key, staging)
        except OSError as err:
            shutil.rmtree(staging, ignore_errors=True)
            if err.errno not in (errno.EEXIST, errno.ENOTEMPTY):
                raise
        return self.lookup(key)

    def evict(self, key: CausalHash, guard: Optional[LockGuard]) -> bool:
        self._check_guard(key, guard)
        obj = self.object_dir(key)
        if not obj.exists():
            return False
        # Move aside first so lookups never see a half-deleted entry.
        doomed = self.root / "staging" / f"{self.token}-evict-{uuid.uuid4().hex[:8]}"
        os.rename(obj, doomed)
        shutil.rmtree(doomed, ignore_errors=True)
        return True

    def keys(self) -> Iterator[CausalHash]:
        for fan in sorted((self.root / "objects").iterdir()):
            for obj in sorted(fan.iterdir()):
                yield CausalHash.from_hex(fan.name + obj.name)

    def stats(self) -> StoreStats:
        count = total = 0
        for key in self.keys():
            entry = self.lookup(key)
            if entry is not None:
                count += 1
                total += entry.size
        return StoreStats(count, total)

    def verify(self, key: Optional[CausalHash] = None) -> list[CausalHash]:
        """Keys whose payload no longer matches the recorded integrity digest."""
        bad = []
        for k in [key] if key is not None else list(self.keys()):
            try:
                entry = self.lookup(k)
            except errors.StoreCorrupt:
                bad.append(k)
                continue
            if entry is not None and integrity_digest(entry.payload, entry.kind) != entry.integrity:
                bad.append(k)
        return bad
