import json
import sys
import threading
import time

import pytest

from conftest import (
    FILE,
    SERVICE,
    bind,
    chain3,
    fast_config,
    fixture_pipeline,
    live_children,
    run_pipeline,
)
from koji import errors
from koji.backends import Fail, LocalBackend, MockBackend, ServeUntilKilled, Succeed
from koji.cache import CacheStore
from koji.controller import ABORTED, DELIVERED, FAILED_EXHAUSTED, Controller, RunConfig
from koji.hashing import output_hashes
from koji.model import (
    Pipeline,
    Resource,
    Slot,
    Step,
    StepInput,
    SubpipelineLogic,
    Transform,
    argument,
    build_graph,
    container_step,
    returning,
)

SERVE_OK = {"serve": [ServeUntilKilled()], "annotate": [Succeed(check_services=True, delay=0.02)]}


def test_arg_to_ret_delivers_without_execution(tmp_path):
    f = tmp_path / "f"
    f.write_text("payload")
    p = Pipeline((argument("A", FILE), returning("R", "A", "A", FILE)))
    report = run_pipeline(p, bind(A=f), tmp_path, MockBackend())
    assert report.status == DELIVERED and report.total_executions() == 0
    assert (tmp_path / "out" / "R").read_text() == "payload"
    assert report.returns["R"].hash == bind(A=f)["A"].hash.hex


def test_fixture_all_succeed(tmp_path, inputs):
    backend = MockBackend(SERVE_OK)
    store = CacheStore(tmp_path / "cache")
    report = run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, backend, store)
    assert report.status == DELIVERED
    assert report.executions() == {"train": 1, "serve": 1, "annotate": 1}
    assert report.steps["serve"].terminations == ["killed"]
    insight = (tmp_path / "out" / "INSIGHT").read_text()
    assert insight.startswith("annotate:insight\n")
    assert backend.violations == [] and backend.live == 0
    saved = json.loads((tmp_path / "run" / "report").read_text())
    assert saved["status"] == DELIVERED
    assert (tmp_path / "run" / "hashes.json").exists()
    assert (tmp_path / "run" / "train" / "0" / "stdout.log").parent.exists()


def test_hashes_precede_every_spawn(tmp_path, inputs):
    report = run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, MockBackend(SERVE_OK))
    kinds = [k for _, k, _ in report.events]
    assert kinds[0] == "hashed" and kinds.count("spawn") == 3


def test_exhaustion_keeps_model_cached(tmp_path, inputs):
    store = CacheStore(tmp_path / "cache")
    backend = MockBackend({"serve": [ServeUntilKilled()], "annotate": [Fail()]})
    bindings = bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"])
    report = run_pipeline(fixture_pipeline(), bindings, tmp_path, backend, store)
    assert report.status == FAILED_EXHAUSTED and report.failed_step == "annotate"
    assert report.steps["annotate"].terminations == ["failed"] * 3
    with pytest.raises(errors.StepExhausted):
        report.check()
    slots = output_hashes(build_graph(fixture_pipeline()), {k: b.hash for k, b in bindings.items()})
    assert store.lookup(slots[("train", "model")]) is not None
    assert store.lookup(slots[("annotate", "insight")]) is None
    assert backend.live == 0
    # the service stayed up across annotate's retries
    assert report.executions()["serve"] == 1


def test_retry_then_success(tmp_path):
    f = tmp_path / "a"
    f.write_text("a")
    backend = MockBackend({"s2": [Fail(), Succeed()]})
    report = run_pipeline(chain3(), bind(A=f), tmp_path, backend)
    assert report.status == DELIVERED
    assert report.steps["s2"].terminations == ["failed", "succeeded"]
    assert report.steps["s1"].terminations == ["succeeded"]  # file-only steps are not collected


def test_unbounded_attempts(tmp_path):
    f = tmp_path / "a"
    f.write_text("a")
    backend = MockBackend({"s1": [Fail(), Fail(), Fail(), Fail(), Succeed()]})
    report = run_pipeline(chain3(), bind(A=f), tmp_path, backend, max_attempts=None)
    assert report.status == DELIVERED and report.executions()["s1"] == 5


def test_cached_step_skips_process(tmp_path):
    f = tmp_path / "a"
    f.write_text("a")
    store = CacheStore(tmp_path / "cache")
    first = run_pipeline(chain3(), bind(A=f), tmp_path, MockBackend(), store, out="o1")
    backend = MockBackend()
    second = Controller(chain3(), bind(A=f), tmp_path / "o2", fast_config(tmp_path / "b"), backend, store).run()
    assert first.total_executions() == 3 and second.total_executions() == 0
    assert second.steps["s3"].cache == {"out": "hit"}
    # only the last step's output was needed; earlier steps never woke up
    assert second.steps["s1"].cache == {}
    assert (tmp_path / "o1" / "R").read_text() == (tmp_path / "o2" / "R").read_text()


def test_spawn_safety(tmp_path, inputs):
    backend = MockBackend(SERVE_OK)
    run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                 tmp_path, backend)
    assert backend.spawns and all(ready for _, _, ready in backend.spawns)


def test_service_available_right_after_spawn(tmp_path, inputs):
    # serve never binds within annotate's lifetime, so availability must not wait for readiness
    backend = MockBackend({"serve": [ServeUntilKilled(ready_delay=30)], "annotate": [Succeed()]})
    t0 = time.monotonic()
    report = run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, backend)
    assert report.status == DELIVERED and time.monotonic() - t0 < 5
    assert report.steps["serve"].terminations == ["killed"]


def test_readiness_probe_waits(tmp_path, inputs):
    backend = MockBackend({"serve": [ServeUntilKilled(ready_delay=0.2)],
                           "annotate": [Succeed(check_services=True)]})
    report = run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, backend, readiness_probe=True)
    assert report.status == DELIVERED and backend.violations == []


def test_abort_tears_down(tmp_path, inputs):
    backend = MockBackend({"serve": [ServeUntilKilled()], "annotate": [Succeed(delay=60)]})
    ctl = Controller(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                     tmp_path / "out", fast_config(tmp_path), backend)
    threading.Timer(0.3, ctl.abort).start()
    report = ctl.run()
    assert report.status == ABORTED and backend.live == 0
    assert report.steps["annotate"].terminations == ["killed"]
    with pytest.raises(errors.RunAborted):
        report.check()


def test_abort_local_processes(tmp_path):
    script = tmp_path / "slow"
    script.write_text(f"#!{sys.executable}\nimport time\ntime.sleep(60)\n")
    script.chmod(0o755)
    f = tmp_path / "a"
    f.write_text("a")
    p = Pipeline((argument("A", FILE),
                  container_step("slow", str(script), [("in", "A", "A", FILE)], [("out", FILE)]),
                  returning("R", "slow", "out", FILE)))
    ctl = Controller(p, bind(A=f), tmp_path / "out", fast_config(tmp_path, kill_grace=0.5), LocalBackend())
    threading.Timer(0.5, ctl.abort).start()
    assert ctl.run().status == ABORTED
    assert live_children() == []


def test_precondition_errors(tmp_path, inputs):
    good = bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"])
    with pytest.raises(errors.MissingArgument):
        Controller(fixture_pipeline(), {"TRAIN": good["TRAIN"]}, tmp_path, backend=MockBackend()).run()
    with pytest.raises(errors.UnknownArgument):
        Controller(fixture_pipeline(), {**good, "X": good["TRAIN"]}, tmp_path, backend=MockBackend()).run()
    dup = Pipeline((argument("A", FILE), argument("A", FILE)))
    with pytest.raises(errors.ValidationFailed):
        Controller(dup, {}, tmp_path, backend=MockBackend()).run()
    mistyped = Pipeline((argument("A", FILE), returning("R", "A", "A", SERVICE)))
    with pytest.raises(errors.TypeCheckFailed):
        Controller(mistyped, {}, tmp_path, backend=MockBackend()).run()
    with pytest.raises(ValueError):
        RunConfig(max_attempts=0)


def test_mixed_outputs_published(tmp_path):
    f = tmp_path / "a"
    f.write_text("a")
    mixed = container_step("m", "mock", [("in", "A", "A", FILE)], [("file", FILE), ("svc", SERVICE)])
    p = Pipeline((argument("A", FILE), mixed, returning("R", "m", "file", FILE)))
    store = CacheStore(tmp_path / "cache")
    report = run_pipeline(p, bind(A=f), tmp_path, MockBackend(), store, out="o1")
    assert report.status == DELIVERED
    again = Controller(p, bind(A=f), tmp_path / "o2", fast_config(tmp_path / "x"), MockBackend(), store).run()
    assert again.executions() == {"m": 1}  # services force execution
    assert again.steps["m"].cache == {"file": "hit"}
    assert store.stats().count == 1


def wrap(inner, label="sub"):
    args, rets = sorted(inner.arguments()), sorted(inner.returns())
    res_in = {n: inner.arguments()[n].transform.outputs[0].resource for n in args}
    res_out = {n: inner.returns()[n].transform.inputs[0].resource for n in rets}
    step = Step(label, tuple(StepInput(n, n, n) for n in args), Transform(
        tuple(Slot(n, res_in[n]) for n in args), tuple(Slot(n, res_out[n]) for n in rets),
        SubpipelineLogic(inner, {n: n for n in args}, {n: n for n in rets})))
    return Pipeline(tuple([argument(n, res_in[n]) for n in args] + [step]
                          + [returning(f"{n}_out", label, n, res_out[n], name=n) for n in rets]))


def test_subpipeline_twice_zero_executions(tmp_path, inputs):
    store = CacheStore(tmp_path / "cache")
    outer = wrap(fixture_pipeline())
    bindings = bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"])
    b1 = MockBackend(SERVE_OK)
    r1 = Controller(outer, bindings, tmp_path / "o1", fast_config(tmp_path / "1"), b1, store).run()
    assert r1.status == DELIVERED and r1.total_executions() == 3
    assert b1.executions == {"sub/train": 1, "sub/serve": 1, "sub/annotate": 1}
    b2 = MockBackend(SERVE_OK)
    r2 = Controller(outer, bindings, tmp_path / "o2", fast_config(tmp_path / "2"), b2, store).run()
    assert r2.status == DELIVERED and r2.total_executions() == 0 and sum(b2.executions.values()) == 0
    assert (tmp_path / "o1" / "INSIGHT").read_bytes() == (tmp_path / "o2" / "INSIGHT").read_bytes()


def test_inner_service_collected_before_outer_continues(tmp_path, inputs):
    inner = fixture_pipeline()
    sub_step = wrap(inner).step("sub")
    after = container_step("after", "mock", [("i", "sub", "INSIGHT", Resource.of_file(format="csv"))],
                           [("o", FILE)])
    p = Pipeline(tuple(s for s in wrap(inner).steps if not s.is_return)
                 + (after, returning("R", "after", "o", FILE)))
    assert sub_step in p.steps
    backend = MockBackend({**SERVE_OK, "after": [Succeed(delay=0.2)]})
    report = run_pipeline(p, bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]), tmp_path, backend)
    assert report.status == DELIVERED
    inner_report = report.steps["sub"].attempts[0].inner
    serve = inner_report.steps["serve"].attempts[0]
    assert serve.termination == "killed"
    assert serve.ended <= report.steps["after"].attempts[0].started


def test_identity_subpipeline_copies(tmp_path):
    f = tmp_path / "a"
    f.write_text("identity")
    inner = Pipeline((argument("X", FILE), returning("Y", "X", "X", FILE)))
    step = Step("copy", (StepInput("i", "A", "A"),), Transform(
        (Slot("i", FILE),), (Slot("o", FILE),), SubpipelineLogic(inner, {"X": "i"}, {"Y": "o"})))
    p = Pipeline((argument("A", FILE), step, returning("R", "copy", "o", FILE)))
    report = run_pipeline(p, bind(A=f), tmp_path, MockBackend())
    assert report.status == DELIVERED and report.total_executions() == 0
    assert (tmp_path / "out" / "R").read_text() == "identity"


def test_inner_failure_fails_outer(tmp_path, inputs):
    backend = MockBackend({"serve": [ServeUntilKilled()], "sub/annotate": [Fail()]})
    report = run_pipeline(wrap(fixture_pipeline()), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, backend, max_attempts=1)
    assert report.status == FAILED_EXHAUSTED and report.failed_step == "sub"
    assert backend.live == 0


def test_no_return_steps_run_nothing(tmp_path, inputs):
    p = Pipeline(tuple(s for s in fixture_pipeline().steps if not s.is_return))
    backend = MockBackend()
    report = run_pipeline(p, bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]), tmp_path, backend)
    assert report.status == DELIVERED and report.total_executions() == 0


def test_directory_outputs_cached(tmp_path):
    f = tmp_path / "a"
    f.write_text("a")
    d = Resource.of_file(directory=True)
    p = Pipeline((argument("A", FILE),
                  container_step("mk", "mock", [("i", "A", "A", FILE)], [("d", d)]),
                  returning("R", "mk", "d", d)))
    store = CacheStore(tmp_path / "c")
    backend = MockBackend({"mk": [Succeed({"d": {"x": "1", "y": "2"}})]})
    report = run_pipeline(p, bind(A=f), tmp_path, backend, store)
    assert report.status == DELIVERED
    assert sorted(x.name for x in (tmp_path / "out" / "R").iterdir()) == ["x", "y"]
    assert store.stats().count == 1


def test_report_roundtrips_as_json(tmp_path, inputs):
    report = run_pipeline(fixture_pipeline(), bind(TRAIN=inputs["TRAIN"], BUSINESS=inputs["BUSINESS"]),
                          tmp_path, MockBackend(SERVE_OK))
    data = json.loads((tmp_path / "run" / "report").read_text())
    assert data["steps"]["serve"]["attempts"][0]["termination"] == "killed"
    assert set(data["returns"]) == {"INSIGHT"}
    assert data == json.loads(json.dumps(report.to_dict()))
