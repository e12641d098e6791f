from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from kgrag.ontology import (
    DanglingReferenceError,
    EntityType,
    OntologyError,
    RelationType,
    Signature,
    UnknownRelationError,
    load_ontology,
    ontology_from_dict,
)


def test_bundled_ontology_has_slice_type_vocabulary(ontology):
    for name in ("SST", "ServiceType", "SliceProfile", "Slice", "QoSAttribute", "gNodeB", "UPF", "MEC", "Document"):
        assert ontology.entity_type(name) is not None


def test_empty_ontology_is_valid_at_version_one():
    o = ontology_from_dict({"entity_types": [], "relation_types": [], "signatures": []})
    assert o.version == 1
    assert not o.permits("A", "r", "B")


def test_dangling_relation_is_named():
    doc = {
        "entity_types": [{"name": "A", "description": "a"}],
        "relation_types": [],
        "signatures": [{"head": "A", "relation": "foo_rel", "tail": "A"}],
    }
    with pytest.raises(DanglingReferenceError, match="foo_rel"):
        ontology_from_dict(doc)


def test_duplicate_entity_type_rejected():
    doc = {
        "entity_types": [{"name": "A", "description": ""}, {"name": "A", "description": ""}],
        "relation_types": [],
        "signatures": [],
    }
    with pytest.raises(OntologyError, match="duplicate"):
        ontology_from_dict(doc)


def test_parse_error_reports_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"entity_types": [\n  {"name": "A",}\n]}')
    with pytest.raises(OntologyError, match=r"bad\.json:2:"):
        load_ontology(p)


def test_bad_semantic_class_rejected():
    doc = {
        "entity_types": [],
        "relation_types": [{"name": "r", "functional": False, "semantic_class": "vibes"}],
        "signatures": [],
    }
    with pytest.raises(OntologyError):
        ontology_from_dict(doc)


@pytest.mark.parametrize(
    "sig, expected",
    [
        (("SST", "suitable_for", "ServiceType"), True),
        (("SliceProfile", "max_latency", "duration_ms"), True),
        (("UPF", "suitable_for", "SST"), False),
        (("Nope", "suitable_for", "SST"), False),
    ],
)
def test_permits(ontology, sig, expected):
    assert ontology.permits(*sig) is expected


def test_permits_matches_declared_signatures_exhaustively(ontology):
    declared = {(s.head, s.relation, s.tail) for s in ontology.signatures}
    heads = [e.name for e in ontology.entity_types]
    tails = heads + ["integer", "duration_ms", "rate_mbps", "degrees", "percent", "text"]
    for h in heads:
        for r in ontology.relation_types:
            for t in tails:
                assert ontology.permits(h, r.name, t) == ((h, r.name, t) in declared)


@pytest.mark.parametrize(
    "relation, cls",
    [("max_latency", "latency_threshold"), ("suitable_for", "slicing_constraint"), ("serves", "operational")],
)
def test_classify_relation(ontology, relation, cls):
    assert ontology.classify_relation(relation) == cls


def test_classify_unknown_relation(ontology):
    with pytest.raises(UnknownRelationError):
        ontology.classify_relation("nope")


def test_functional_flags(ontology):
    assert ontology.is_functional("max_latency")
    assert ontology.is_functional("have")
    assert not ontology.is_functional("serves")
    assert not ontology.is_functional("connected_to")


def test_mutation_bumps_version(ontology):
    o2 = ontology.with_entity_type(EntityType("Router", "IP router", id_pattern=r"R\d+"))
    o3 = o2.with_relation_type(RelationType("peers_with", False, "operational", ""))
    o4 = o3.with_signature(Signature("Router", "peers_with", "Router"))
    assert ontology.version < o2.version < o3.version < o4.version
    assert o4.permits("Router", "peers_with", "Router")
    assert not ontology.permits("Router", "peers_with", "Router")


def test_type_inference_and_display(ontology):
    assert ontology.type_of("SST_2") == "SST"
    assert ontology.type_of("gNodeB-43") == "gNodeB"
    assert ontology.type_of("50ms") is None
    assert ontology.display("SST_2") == "SST Type 2"
    assert ontology.display("Slice_27") == "Slice 27"
    assert ontology.display("gNodeB-43") == "gNodeB-43"


def test_round_trip_through_dict(ontology):
    again = ontology_from_dict(json.loads(json.dumps(ontology.to_dict())))
    assert {s.relation for s in again.signatures} == {s.relation for s in ontology.signatures}
    assert again.permits("SST", "suitable_for", "ServiceType")


names = st.sampled_from(["SST", "UPF", "gNodeB", "SliceProfile", "x", "duration_ms", "ServiceType"])
rels = st.sampled_from(["suitable_for", "max_latency", "serves", "foo"])


@given(names, rels, names)
def test_permits_is_pure(h, r, t):
    o = load_ontology()
    assert o.permits(h, r, t) == o.permits(h, r, t)
