from __future__ import annotations

import pytest

from kgrag.engine import DEFAULT_K, Engine, context_for
from kgrag.errors import StageError
from kgrag.genclient import ABSTAIN, Draft
from kgrag.kg_store import KnowledgeGraph, Provenance, Triple
from kgrag.synthetic import DEMO_QUERIES, build_demo_store

SLICE_TYPE_Q = DEMO_QUERIES[0]
ROOT_CAUSE = "What's causing the issue in Slice 27, and how to fix it now?"


class Exploding:
    backend_id = "boom"

    def draft(self, prompt):
        raise RuntimeError("backend down")


def cited_keys(bundle):
    """Triples behind the tags the answer itself cites (the citation list covers all evidence)."""
    used = set(bundle.answer.cited_tags)
    return {(c["subject"], c["relation"], c["object"]) for c in bundle.citations() if c["tag"] in used}


def test_slice_type_answer_cites_both_facts_and_explains(demo_engine):
    b = demo_engine.answer(SLICE_TYPE_Q)
    assert b.answer.text == "Configure the slice as SST Type 2 (URLLC)."
    assert {("SST_2", "suitable_for", "URLLC"), ("SliceProfile", "max_latency", "50ms")} <= cited_keys(b)
    assert b.answer.explanation == "This satisfies the 50 ms latency requirement defined in the slice profile."


def test_empty_kg_abstains(ontology, make_engine):
    b = make_engine(KnowledgeGraph(ontology)).answer(SLICE_TYPE_Q)
    assert b.answer.text == ABSTAIN
    assert b.evidence == () and b.citations() == []


def test_bundles_are_deterministic(demo_kg, make_engine, ontology):
    a = make_engine(demo_kg).answer(SLICE_TYPE_Q).canonical()
    b = make_engine(build_demo_store(ontology)).answer(SLICE_TYPE_Q).canonical()
    assert a == b


def test_every_citation_resolves_to_live_sourced_triple(demo_engine, demo_kg):
    for q in DEMO_QUERIES:
        b = demo_engine.answer(q)
        assert b.answer.text != ABSTAIN, q
        assert len(b.citations()) == len(b.cite_map)
        for c in b.citations():
            t = demo_kg.get(c["triple_id"])
            assert t is not None and t.live
            assert c["doc_uri"] and c["paragraph"] is not None


def test_root_cause_query_cites_the_spectrum_change(demo_engine):
    b = demo_engine.answer(ROOT_CAUSE)
    assert b.answer.text.startswith("The 03:15 spectrum reassignment on gNodeB-43")
    keys = cited_keys(b)
    assert ("gNodeB-43", "last_change", "spectrum_reassign@03:15") in keys
    assert all(s.startswith("gNodeB-4") for s, _, _ in keys)


def test_generation_failure_leaves_state_untouched(demo_kg, make_engine, templates, aliases):
    engine = Engine(demo_kg, templates, aliases, Exploding())
    rev, snap_index = demo_kg.revision, engine.state()
    with pytest.raises(StageError) as err:
        engine.answer(SLICE_TYPE_Q)
    assert err.value.stage == "generate"
    assert demo_kg.revision == rev
    assert engine.state() is snap_index


def test_bad_citation_surfaces_as_generate_stage(demo_kg, templates, aliases):
    class Liar:
        backend_id = "liar"

        def draft(self, prompt):
            return Draft("x", ("T999",))

    with pytest.raises(StageError) as err:
        Engine(demo_kg, templates, aliases, Liar()).answer(SLICE_TYPE_Q)
    assert err.value.stage == "generate"


def test_refresh_picks_up_new_triples(demo_kg, demo_engine):
    before = demo_engine.revision
    demo_kg.insert(Triple("gNodeB-42", "throughput", "120Mbps",
                          Provenance("telemetry://kpi/gNodeB-42", 1, "telemetry", "2025-06-01T05:00:00Z"),
                          "2025-06-01T05:00:00Z"))
    assert demo_engine.revision == before
    demo_engine.refresh()
    assert demo_engine.revision == demo_kg.revision
    assert demo_engine.answer("What is the throughput of gNodeB-42?").answer.text == "120 Mbps"


def test_focus_lists_named_entities_then_neighbours(demo_engine):
    snap, _ = demo_engine.state()
    f = demo_engine.focus("Which slice policy does Slice 27 run?", snap)
    assert f[0] == "Slice_27"
    assert {"gNodeB-42", "gNodeB-43", "UPF-X"} <= set(f[1:])


def test_focus_without_expansion(demo_kg, make_engine):
    e = make_engine(demo_kg, expand_hops=0)
    assert e.focus("Which slice policy does Slice 27 run?", e.state()[0]) == ["Slice_27"]
    with pytest.raises(ValueError):
        make_engine(demo_kg, expand_hops=-1)


def test_context_from_prior_turns(demo_engine):
    ctx = context_for(demo_engine, ["Tell me about gNodeB-42", "and UPF-X?"])
    assert ctx.recent_entities[:2] == ("UPF-X", "gNodeB-42")


def test_explicit_k_caps_evidence(demo_engine):
    assert len(demo_engine.answer(SLICE_TYPE_Q, k=3).evidence) == 3
    assert len(demo_engine.answer(SLICE_TYPE_Q).evidence) == DEFAULT_K


def test_bundle_dict_has_no_wall_clock(demo_engine):
    d = demo_engine.answer(SLICE_TYPE_Q).to_dict()
    assert "latency_ms" not in d["answer"]
    assert demo_engine.answer(SLICE_TYPE_Q).to_dict(with_latency=True)["answer"]["latency_ms"] >= 0
