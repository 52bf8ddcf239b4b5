import itertools
import random
from dataclasses import replace

from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FILE, fixture_pipeline
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
    returning,
)
from koji.typecheck import check_pipeline, fulfills, mismatch

strings = st.one_of(st.none(), st.sampled_from(["csv", "json", "utf-8", "latin-1", "x"]))
resources = st.one_of(
    st.builds(Resource.of_file, st.booleans(), strings, strings),
    st.builds(Resource.of_service, st.one_of(st.none(), st.sampled_from(["openapi://a.B", "grpc://c.D"]))),
)


def test_examples():
    csv = Resource.of_file(format="csv")
    assert fulfills(csv, Resource.of_file(format="csv")) is None
    assert fulfills(Resource.of_file(), Resource.of_service()) == "KindMismatch"
    assert fulfills(Resource.of_service("openapi://org.proto.path.to.Service"), Resource.of_service()) is None
    assert fulfills(Resource.of_file(True), Resource.of_file(False)) == "DirectoryMismatch"


def test_directory_flags_exhaustive():
    for a, b in itertools.product([False, True], repeat=2):
        expected = None if a == b else "DirectoryMismatch"
        assert fulfills(Resource.of_file(a), Resource.of_file(b)) == expected


def test_rule_order():
    p = Resource.of_file(True, "utf-8", "csv")
    c = Resource.of_file(False, "latin-1", "json")
    assert fulfills(p, c) == "DirectoryMismatch"
    assert fulfills(p, Resource.of_file(True, "latin-1", "json")) == "FormatMismatch"
    assert fulfills(p, Resource.of_file(True, "latin-1", "csv")) == "EncodingMismatch"
    assert mismatch(Resource.of_service("a"), Resource.of_service("b")) == ("ProtocolMismatch", "a", "b")


def test_opaque_strings_are_exact():
    assert fulfills(Resource.of_file(format="CSV"), Resource.of_file(format="csv")) == "FormatMismatch"


def test_fixture_is_well_typed():
    assert check_pipeline(build_graph(fixture_pipeline())) == []


def _retype_input(p, label, name, res):
    steps = []
    for s in p.steps:
        if s.label == label:
            slots = tuple(Slot(x.name, res) if x.name == name else x for x in s.transform.inputs)
            s = replace(s, transform=replace(s.transform, inputs=slots))
        steps.append(s)
    return Pipeline(tuple(steps))


def test_kind_mismatch_on_train_serve():
    p = _retype_input(fixture_pipeline(), "serve", "model", Resource.of_service())
    g = build_graph(p)
    found = check_pipeline(g)
    # oracle: apply fulfills to every edge independently
    oracle = [(str(e), fulfills(e.resource, g.consumer_resource(e))) for e in g.edges]
    oracle = [x for x in oracle if x[1] is not None]
    assert [(str(d.edge), d.kind) for d in found] == oracle == [("train.model -> serve.model", "KindMismatch")]


def test_zero_edges():
    assert check_pipeline(build_graph(Pipeline((argument("A", FILE),)))) == []


def test_subpipeline_boundaries_checked():
    inner = Pipeline((argument("A", Resource.of_file(format="csv")),
                      returning("R", "A", "A", Resource.of_file(format="csv"))))
    step = Step("sub", (StepInput("x", "A", "A"),), Transform(
        (Slot("x", Resource.of_file(format="json")),), (Slot("y", FILE),),
        SubpipelineLogic(inner, {"A": "x"}, {"R": "y"})))
    p = Pipeline((argument("A", Resource.of_file(format="json")), step, returning("R", "sub", "y", FILE)))
    kinds = [(str(d.edge), d.kind) for d in check_pipeline(build_graph(p))]
    assert kinds == [("sub.x -> sub/A.A", "FormatMismatch")]


@given(resources)
def test_reflexive(r):
    assert fulfills(r, r) is None


@given(resources, resources)
def test_wildcard_monotonic(p, c):
    if fulfills(p, c) is None:
        erased = (Resource.of_file(c.file.directory) if c.is_file else Resource.of_service())
        assert fulfills(p, erased) is None


@given(resources, resources)
def test_rules_symmetric(p, c):
    assert fulfills(p, c) == fulfills(c, p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(resources, resources), min_size=1, max_size=6), st.randoms())
def test_check_is_per_edge(pairs, rnd):
    steps = []
    for i, (p, c) in enumerate(pairs):
        steps.append(argument(f"A{i}", p))
        steps.append(returning(f"R{i}", f"A{i}", f"A{i}", c))
    rnd.shuffle(steps)
    g = build_graph(Pipeline(tuple(steps)))
    got = {str(d.edge): d.kind for d in check_pipeline(g)}
    expect = {f"A{i}.A{i} -> R{i}.R{i}": fulfills(p, c) for i, (p, c) in enumerate(pairs)}
    assert got == {k: v for k, v in expect.items() if v}
    random.shuffle(steps)
    again = {str(d.edge): d.kind for d in check_pipeline(build_graph(Pipeline(tuple(steps))))}
    assert again == got
