from __future__ import annotations

import json
import random

import pytest

from kgrag.config import bundled_path
from kgrag.dynamics import (
    EventError,
    LatencyStats,
    OutOfOrderEvent,
    ProbeError,
    UnknownTargetError,
    UpdateEvent,
    apply_event,
    load_events,
    load_probes,
    parse_events,
    rebuild,
    run_bench,
)
from kgrag.kg_store import InsertOutcome, KnowledgeGraph
from kgrag.retrieval import build_index, default_encoder
from kgrag.synthetic import SPECTRUM_EVENT, build_demo_store, demo_base_triples, slice27_scenario


@pytest.fixture(scope="module")
def scenario():
    return load_events(bundled_path("slice27_stream.jsonl")), load_probes(bundled_path("slice27_probes.jsonl"))


@pytest.fixture
def factory(make_engine):
    return lambda kg: make_engine(kg)


def live_keys(kg):
    return {t.key for t in kg.live_triples()}


def ev(i, ts, kind="tilt_adjust", target="gNodeB-42", **payload):
    payload = payload or {"tilt_deg": 7}
    return UpdateEvent(f"E-{i}", ts, kind, target, payload)


# -- apply_event ----------------------------------------------------------------------


def test_spectrum_reassign_supersedes_prior_band(ontology):
    kg = KnowledgeGraph(ontology)
    kg.insert_many(demo_base_triples())
    assert [t.object for t in kg.lookup(subject="gNodeB-43", relation="spectrum_band")] == ["n78"]
    summary, _ = apply_event(kg, None, UpdateEvent.from_dict(SPECTRUM_EVENT))
    assert [t.object for t in kg.lookup(subject="gNodeB-43", relation="spectrum_band")] == ["n77"]
    assert len(summary.superseded) == 1
    assert kg.get(summary.superseded[0]).object == "n78"
    assert [t.object for t in kg.lookup(subject="gNodeB-43", relation="last_change")] == [
        "spectrum_reassign@03:15"]


def test_apply_event_keeps_index_in_step(demo_kg, templates, aliases):
    enc = default_encoder(aliases.glossary())
    index = build_index(demo_kg.snapshot(), enc, templates)
    _, index = apply_event(demo_kg, index, ev(1, "2025-06-02T00:00:00Z"))
    assert index.revision == demo_kg.revision
    assert index.same_entries(build_index(demo_kg.snapshot(), enc, templates))


def test_unknown_target_of_inferable_type_is_created(demo_kg):
    summary, _ = apply_event(demo_kg, None, ev(1, "2025-06-02T00:00:00Z", target="gNodeB-99"))
    assert summary.created_target
    assert demo_kg.lookup(subject="gNodeB-99", relation="tilt_deg")[0].object == "7deg"


def test_target_of_wrong_type_is_refused(demo_kg):
    rev = demo_kg.revision
    with pytest.raises(UnknownTargetError):
        apply_event(demo_kg, None, ev(1, "2025-06-02T00:00:00Z", target="UPF-X"))
    with pytest.raises(UnknownTargetError):
        apply_event(demo_kg, None, ev(2, "2025-06-02T00:00:00Z", target="tower-7"))
    assert demo_kg.revision == rev


def test_replaying_an_event_is_a_noop(demo_kg):
    e = ev(1, "2025-06-02T00:00:00Z")
    apply_event(demo_kg, None, e)
    rev, live = demo_kg.revision, live_keys(demo_kg)
    summary, _ = apply_event(demo_kg, None, e)
    assert summary.noop and summary.outcomes[InsertOutcome.DUPLICATE] == 2
    assert demo_kg.revision == rev and live_keys(demo_kg) == live


def test_out_of_order_event_is_refused(demo_kg):
    apply_event(demo_kg, None, ev(1, "2025-06-02T00:00:00Z"))
    with pytest.raises(OutOfOrderEvent):
        apply_event(demo_kg, None, ev(2, "2025-06-01T23:59:59Z"))


@pytest.mark.parametrize(
    "record, msg",
    [
        ({"event_id": "x", "timestamp": "2025-06-01T00:00:00Z", "kind": "reboot", "target": "gNodeB-42"}, "kind"),
        ({"event_id": "x", "timestamp": "2025-06-01T00:00:00Z", "kind": "upf_scale", "target": "UPF-X"}, "cpu_share"),
        ({"event_id": "x", "kind": "upf_scale", "target": "UPF-X"}, "timestamp"),
        ({"event_id": "", "timestamp": "2025-06-01T00:00:00Z", "kind": "tilt_adjust", "target": "gNodeB-1",
          "payload": {"tilt_deg": 3}}, "event_id"),
    ],
)
def test_malformed_events(record, msg):
    with pytest.raises(EventError, match=msg):
        UpdateEvent.from_dict(record)


def test_parse_events_reports_line(tmp_path):
    good = json.dumps(SPECTRUM_EVENT)
    with pytest.raises(EventError, match="stream.jsonl:2"):
        parse_events([good, "{nope"], "stream.jsonl")


def test_event_dict_round_trip():
    e = UpdateEvent.from_dict(SPECTRUM_EVENT)
    assert UpdateEvent.from_dict(e.to_dict()) == e


def test_number_formatting_in_derived_objects():
    e = UpdateEvent("E", "2025-06-01T00:00:00Z", "upf_scale", "UPF-X", {"cpu_share": 75.0})
    assert e.derived_triples()[0].object == "75%"
    e = UpdateEvent("E", "2025-06-01T00:00:00Z", "tilt_adjust", "gNodeB-1", {"tilt_deg": 6.5})
    assert e.derived_triples()[0].object == "6.5deg"


# -- rebuild equivalence ----------------------------------------------------------------


def test_every_prefix_rebuilds_to_incremental_state(ontology, scenario):
    stream, _ = scenario
    base = demo_base_triples()
    spectrum = UpdateEvent.from_dict(SPECTRUM_EVENT)
    kg = build_demo_store(ontology)
    applied = [spectrum]
    for i, e in enumerate(stream[:60]):
        apply_event(kg, None, e)
        applied.append(e)
        if i % 6 == 0:
            assert live_keys(kg) == live_keys(rebuild(base, applied, ontology))


def test_bundled_scenario_matches_generator(ontology, scenario):
    events, probes = slice27_scenario(ontology)
    assert events == scenario[0] and probes == scenario[1]
    assert len(events) == 200


# -- bench ----------------------------------------------------------------------------


def test_static_mode_is_stale_on_every_changed_probe(ontology, scenario, factory):
    stream, probes = scenario
    report = run_bench(factory, build_demo_store(ontology), stream, probes, mode="static")
    assert report.post_change_accuracy == 0.0
    assert report.staleness_rate == 1.0
    assert all(len(t.asks) == 3 for t in report.per_event)


def test_dynamic_mode_is_correct_within_one_poll(ontology, scenario, factory):
    stream, probes = scenario
    report = run_bench(factory, build_demo_store(ontology), stream, probes, mode="dynamic")
    assert report.post_change_accuracy == 1.0 and report.staleness_rate == 0.0
    assert all(t.delay_s is not None and t.delay_s <= report.poll_interval_s for t in report.per_event)


def test_empty_stream_modes_agree(ontology, factory):
    a = run_bench(factory, build_demo_store(ontology), [], [], mode="static")
    b = run_bench(factory, build_demo_store(ontology), [], [], mode="dynamic")
    assert a.to_dict() | {"mode": ""} == b.to_dict() | {"mode": ""}


def test_longer_poll_interval_never_shortens_delay(ontology, scenario, factory):
    stream, probes = scenario
    stream, probes = stream[:40], [p for p in probes if p.event_id in {e.event_id for e in stream[:40]}]
    delays = []
    for poll in (0.5, 1.0, 2.0, 7.0):
        r = run_bench(factory, build_demo_store(ontology), stream, probes, poll_interval_s=poll)
        delays.append(r.delay_median_s)
    assert delays == sorted(delays)


def test_dynamic_dominates_static_on_random_streams(ontology, scenario, factory):
    stream, probes = scenario
    rng = random.Random(2)
    for _ in range(3):
        cut = rng.randint(10, len(stream))
        ids = {e.event_id for e in stream[:cut]}
        sub = [p for p in probes if p.event_id in ids]
        dyn = run_bench(factory, build_demo_store(ontology), stream[:cut], sub, mode="dynamic")
        sta = run_bench(factory, build_demo_store(ontology), stream[:cut], sub, mode="static")
        assert dyn.staleness_rate < sta.staleness_rate


def test_probe_for_missing_event_is_refused(ontology, scenario, factory):
    stream, probes = scenario
    with pytest.raises(ProbeError, match="absent"):
        run_bench(factory, build_demo_store(ontology), stream[:1], probes)


def test_bench_rejects_bad_parameters(ontology, factory):
    with pytest.raises(ValueError):
        run_bench(factory, build_demo_store(ontology), [], [], mode="lazy")
    with pytest.raises(ValueError):
        run_bench(factory, build_demo_store(ontology), [], [], poll_interval_s=0)


def test_malformed_probe_file(tmp_path):
    p = tmp_path / "probes.jsonl"
    p.write_text('{"query": "q"}\n')
    with pytest.raises(ProbeError, match="probes.jsonl:1"):
        load_probes(p)


def test_latency_order_statistics():
    rng = random.Random(0)
    for _ in range(20):
        s = LatencyStats.of([rng.expovariate(1.0) for _ in range(rng.randint(1, 50))])
        assert s.p95_ms >= s.min_ms and s.mean_ms >= s.min_ms
    with pytest.raises(ValueError):
        LatencyStats.of([])
