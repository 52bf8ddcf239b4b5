import filecmp
import hashlib
import os
import signal
import subprocess
import sys
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koji import errors
from koji.cache import DIRECTORY, FILE, CacheStore
from koji.hashing import CausalHash


def key(text: str) -> CausalHash:
    return CausalHash(hashlib.sha256(text.encode()).digest())


@pytest.fixture
def store(tmp_path):
    return CacheStore(tmp_path / "store")


def src_file(tmp_path, content=b"payload", name="src"):
    p = tmp_path / name
    p.write_bytes(content)
    return p


def test_layout_and_version(store):
    assert (store.root / "version").read_text().strip() == "1"
    k = key("a")
    assert store.object_dir(k) == store.root / "objects" / k.hex[:2] / k.hex[2:]
    assert store.lock_path(k).name == f"{k.hex}.lock"


def test_fresh_lookup(store):
    assert store.lookup(key("nothing")) is None


def test_roundtrip_and_idempotent(store, tmp_path):
    k = key("a")
    with store.acquire(k) as g:
        e1 = store.publish(k, src_file(tmp_path), FILE, g)
        before = store.stats()
        e2 = store.publish(k, src_file(tmp_path, b"other"), FILE, g)
    assert e2 == e1 and store.stats() == before
    entry = store.lookup(k)
    assert entry.payload.read_bytes() == b"payload"
    assert entry.kind == FILE and entry.size == 7
    assert entry.integrity == hashlib.sha256(b"payload").hexdigest()
    assert not os.access(entry.payload, os.W_OK) or os.geteuid() == 0
    assert entry.payload.stat().st_mode & 0o222 == 0


def test_directory_entry(store, tmp_path):
    d = tmp_path / "d"
    (d / "nested").mkdir(parents=True)
    for i, name in enumerate(["a", "b", "nested/c"]):
        (d / name).write_text(f"content {i}")
    k = key("dir")
    with store.acquire(k) as g:
        store.publish(k, d, DIRECTORY, g)
    entry = store.lookup(k)
    assert entry.kind == DIRECTORY
    cmp = filecmp.dircmp(d, entry.payload)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in ["a", "b", "nested/c"]:
        assert (d / name).read_bytes() == (entry.payload / name).read_bytes()


def test_publish_preconditions(store, tmp_path):
    k = key("a")
    with pytest.raises(errors.NotHoldingLock):
        store.publish(k, src_file(tmp_path), FILE, None)
    with store.acquire(key("other")) as wrong:
        with pytest.raises(errors.NotHoldingLock):
            store.publish(k, src_file(tmp_path), FILE, wrong)
    with store.acquire(k) as g:
        with pytest.raises(errors.SourceMissing):
            store.publish(k, tmp_path / "missing", FILE, g)
        with pytest.raises(errors.KindMismatch):
            store.publish(k, src_file(tmp_path), DIRECTORY, g)
    released = store.acquire(k)
    released.release()
    released.release()
    with pytest.raises(errors.NotHoldingLock):
        store.publish(k, src_file(tmp_path), FILE, released)


def test_partial_publication_invisible(store, tmp_path):
    k = key("crash")
    staging = store._stage(k, src_file(tmp_path), FILE)
    assert staging.exists()
    assert store.lookup(k) is None
    # a later publisher succeeds regardless of the leftover
    with store.acquire(k) as g:
        assert store.publish(k, src_file(tmp_path, b"fresh"), FILE, g).payload.read_bytes() == b"fresh"


def test_orphaned_staging_swept(tmp_path):
    store = CacheStore(tmp_path / "s")
    dead = subprocess.Popen([sys.executable, "-c", "pass"])
    dead.wait()
    orphan = store.root / "staging" / f"{dead.pid}-abc-deadbeef"
    orphan.mkdir()
    mine = store.root / "staging" / f"{os.getpid()}-abc-live"
    mine.mkdir()
    CacheStore(store.root)
    assert not orphan.exists() and mine.exists()


def test_corrupt_marker(store, tmp_path):
    k = key("c")
    obj = store.object_dir(k)
    obj.mkdir(parents=True)
    (obj / "meta").write_text('{"kind": "file", "created_at": 0, "size": 0, "integrity": ""}')
    with pytest.raises(errors.StoreCorrupt):
        store.lookup(k)


def test_evict_and_stats(store, tmp_path):
    assert store.stats().count == 0
    with store.acquire(key("absent")) as g:
        assert store.evict(key("absent"), g) is False
    keys = [key(str(i)) for i in range(4)]
    for i, k in enumerate(keys):
        with store.acquire(k) as g:
            store.publish(k, src_file(tmp_path, b"x" * i), FILE, g)
    subdirs = [p for fan in (store.root / "objects").iterdir() for p in fan.iterdir()]
    assert store.stats().count == len(subdirs) == 4
    assert store.stats().total_bytes == sum(range(4))
    with pytest.raises(errors.NotHoldingLock):
        store.evict(keys[0], None)
    with store.acquire(keys[0]) as g:
        assert store.evict(keys[0], g) is True
    assert store.lookup(keys[0]) is None
    assert store.stats().count == 3


def test_verify_detects_flipped_byte(store, tmp_path):
    k = key("v")
    with store.acquire(k) as g:
        entry = store.publish(k, src_file(tmp_path, b"abcdef"), FILE, g)
    assert store.verify() == []
    entry.payload.chmod(0o644)
    data = bytearray(entry.payload.read_bytes())
    data[2] ^= 0xFF
    entry.payload.write_bytes(bytes(data))
    assert store.verify() == [k]
    assert store.verify(k) == [k]


def test_thread_exclusion_ordering(store):
    k = key("lock")
    events = []
    a_holds = threading.Event()

    def worker_b():
        a_holds.wait()
        with store.acquire(k):
            events.append("b-acquired")

    t = threading.Thread(target=worker_b)
    t.start()
    with store.acquire(k):
        a_holds.set()
        time.sleep(0.2)
        events.append("a-release")
    t.join()
    assert events == ["a-release", "b-acquired"]


def test_independent_keys(store):
    g1 = store.acquire(key("1"), timeout=0.5)
    g2 = store.acquire(key("2"), timeout=0.5)
    assert g1.held and g2.held
    g1.release(), g2.release()


HOLDER = """
import sys
from koji.cache import CacheStore
from koji.hashing import CausalHash
store = CacheStore(sys.argv[1])
guard = store.acquire(CausalHash.from_hex(sys.argv[2]))
print("held", flush=True)
sys.stdin.read()
"""


def _holder(store, k):
    p = subprocess.Popen([sys.executable, "-c", HOLDER, str(store.root), k.hex],
                         stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
    assert p.stdout.readline().strip() == "held"
    return p


def test_cross_process_exclusion(store):
    k = key("x")
    p = _holder(store, k)
    with pytest.raises(errors.LockTimeout):
        store.acquire(k, timeout=0.2)
    p.stdin.close()
    p.wait()
    with store.acquire(k, timeout=5):
        pass


def test_crashed_holder_releases(store):
    k = key("y")
    p = _holder(store, k)
    os.kill(p.pid, signal.SIGKILL)
    p.wait()
    with store.acquire(k, timeout=5):
        pass


def test_lock_cancel(store):
    k = key("z")
    with store.acquire(k):
        with pytest.raises(errors.LockCancelled):
            store.acquire(k, cancel=lambda: True)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6))
def test_single_publisher_under_race(tmp_path_factory, workers):
    root = tmp_path_factory.mktemp("race")
    store = CacheStore(root / "s")
    src = root / "src"
    src.write_bytes(b"data")
    k = key("cold")
    published = []
    barrier = threading.Barrier(workers)

    def worker(i):
        barrier.wait()
        with store.acquire(k) as g:
            if store.lookup(k) is None:
                published.append(i)
                store.publish(k, src, FILE, g)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(published) == 1
    assert store.lookup(k).payload.read_bytes() == b"data"
