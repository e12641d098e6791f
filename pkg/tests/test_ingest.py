from __future__ import annotations

import json
import re

import pytest
from hypothesis import given, settings, strategies as st

from kgrag.ingest import (
    AliasTable,
    BackendError,
    Candidate,
    DocumentChunk,
    EmptyDocumentError,
    ExtractionReport,
    ExtractionRule,
    MockExtractor,
    RuleError,
    chunk_document,
    extract_model,
    extract_rules,
    fold,
    ingest_document,
    load_rules,
    normalize,
)
from kgrag.kg_store import InsertOutcome, KnowledgeGraph, Provenance


def chunk(text, uri="doc://t", para=0, date="2024-03-01T00:00:00Z"):
    return DocumentChunk(uri, para, text, "spec", date)


# -- chunking --------------------------------------------------------------------------


def test_two_paragraphs_two_chunks():
    out = chunk_document("doc://a", "First paragraph.\n\nSecond paragraph.", "spec")
    assert [(c.paragraph, c.text) for c in out] == [(0, "First paragraph."), (1, "Second paragraph.")]
    assert all(c.provenance.doc_uri == "doc://a" for c in out)


def test_long_paragraph_is_split_with_contiguous_coverage():
    sentence = "The user plane function forwards packets for the slice. "
    text = (sentence * 90).strip()
    assert len(text) > 5000
    out = chunk_document("doc://long", text, "spec")
    assert len(out) >= 3
    assert all(len(c.text) <= 2000 for c in out)
    assert [c.paragraph for c in out] == list(range(len(out)))
    assert re.sub(r"\s+", "", "".join(c.text for c in out)) == re.sub(r"\s+", "", text)


def test_sentence_free_text_still_splits():
    text = "x" * 4500
    out = chunk_document("doc://blob", text, "spec", max_chunk_chars=2000)
    assert "".join(c.text for c in out) == text
    assert max(len(c.text) for c in out) <= 2000


@pytest.mark.parametrize("raw", ["", "   \n\n\t  "])
def test_empty_document_rejected(raw):
    with pytest.raises(EmptyDocumentError):
        chunk_document("doc://e", raw, "spec")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.text(alphabet="abc .\n", min_size=1, max_size=400), min_size=1, max_size=6))
def test_chunks_cover_input(paragraphs):
    raw = "\n\n".join(paragraphs)
    if not raw.strip():
        return
    out = chunk_document("doc://h", raw, "spec", max_chunk_chars=120)
    assert all(c.text.strip() and len(c.text) <= 120 for c in out)
    assert len({(c.doc_uri, c.paragraph) for c in out}) == len(out)
    assert re.sub(r"\s+", "", "".join(c.text for c in out)) == re.sub(r"\s+", "", raw)


# -- aliases ---------------------------------------------------------------------------


def test_fold_strips_case_and_punctuation():
    assert fold("Ultra-Reliable, Low-Latency  Communications!") == "ultra reliable low latency communications"


@pytest.mark.parametrize(
    "surface, canonical",
    [
        ("URLLC applications", "URLLC"),
        ("ultra-reliable low-latency communications", "URLLC"),
        ("SST Type 2", "SST_2"),
        ("the slice profile", "SliceProfile"),
        ("gNodeB-43", "gNodeB-43"),
    ],
)
def test_alias_canonicalization(aliases, surface, canonical):
    assert aliases.entity(surface) == canonical


def test_literal_parsing(aliases):
    assert aliases.canonical_object("max_latency", "50 ms") == "50ms"
    assert aliases.canonical_object("throughput", "450 Mbps") == "450Mbps"
    assert aliases.canonical_object("max_latency", "fast") is None


def test_mentions_include_known_entity_ids(aliases):
    table = aliases.with_entities(["Slice_27", "gNodeB-43"])
    assert table.find_mentions("What is wrong with Slice 27 near gNodeB-43?") == {"Slice_27", "gNodeB-43"}


def test_alias_to_unknown_entity_rejected(ontology):
    with pytest.raises(ValueError):
        AliasTable({"foo": "NotAnEntity!"}, ontology)


def test_alias_folding_collision_rejected(ontology):
    with pytest.raises(ValueError, match="maps to both"):
        AliasTable({"cell A": "gNodeB-42", "Cell-A": "gNodeB-43"}, ontology)


# -- rules -----------------------------------------------------------------------------


def test_sst_rule_on_table_sentence(rules, ontology, aliases):
    c = chunk("Slice suitable for ultra-reliable low-latency communications")
    triples = normalize(extract_rules(c, rules, ontology, aliases), aliases)
    assert [t.key for t in triples] == [("SST_2", "suitable_for", "URLLC")]
    assert triples[0].provenance.doc_uri == "doc://t"


def test_max_latency_rule(rules, ontology, aliases):
    c = chunk("The slice profile sets max latency 50 ms for the service.")
    keys = {t.key for t in normalize(extract_rules(c, rules, ontology, aliases), aliases)}
    assert ("SliceProfile", "max_latency", "50ms") in keys


def test_no_rule_match(rules, ontology, aliases):
    assert extract_rules(chunk("Nothing relevant is said here."), rules, ontology, aliases) == []


def test_rule_hits_have_full_confidence(rules, ontology, aliases):
    c = chunk("SST 1 (eMBB): Slice suitable for the handling of 5G enhanced Mobile Broadband.")
    hits = extract_rules(c, rules, ontology, aliases)
    assert hits and all(h.confidence == 1.0 for h in hits)


def test_rule_with_unknown_relation_rejected(ontology, tmp_path):
    p = tmp_path / "rules.json"
    p.write_text(json.dumps([{"pattern": "(?P<a>x)", "relation": "teleports_to", "slots": {"subject": "{a}", "object": "{a}"}}]))
    with pytest.raises(RuleError, match="teleports_to"):
        load_rules(ontology, p)


def test_rule_with_bad_regex_rejected():
    with pytest.raises(RuleError):
        ExtractionRule(r"(", "serves", "x", "y", "bad")


def test_rule_with_unbound_slot(ontology):
    rule = ExtractionRule(r"(?P<a>gNodeB-\d+) serves", "serves", "{a}", "{b}", "slot")
    with pytest.raises(RuleError, match="unbound"):
        extract_rules(chunk("gNodeB-4 serves"), [rule], ontology)


# -- model backend ---------------------------------------------------------------------

HAVE = MockExtractor([{"when": "have", "emit": [["SliceProfile", "have", "SST_2", 0.9]]}])


def test_model_candidate_retained_above_threshold(ontology, aliases):
    out = extract_model(chunk("linked by have to SST 2"), HAVE, ontology, 0.5, aliases)
    assert [(c.subject, c.relation, c.object) for c in out] == [("SliceProfile", "have", "SST_2")]


def test_model_candidate_filtered_by_threshold(ontology, aliases):
    report = ExtractionReport()
    assert extract_model(chunk("linked by have"), HAVE, ontology, 0.95, aliases, report) == []
    assert report.below_threshold == 1


def test_schema_violation_counted(ontology, aliases):
    bad = MockExtractor([{"when": "plane", "emit": [["UPF-X", "suitable_for", "SST_1", 0.99]]}])
    report = ExtractionReport()
    assert extract_model(chunk("user plane"), bad, ontology, 0.5, aliases, report) == []
    assert report.schema_violations == 1
    assert report.rejects[0][1] == "schema"


def test_backend_failure_carries_chunk_context(ontology):
    class Broken:
        def extract(self, chunk):
            raise ConnectionError("refused")

    with pytest.raises(BackendError, match=r"doc://t#0"):
        extract_model(chunk("x"), Broken(), ontology)


def test_min_confidence_range_checked(ontology):
    with pytest.raises(ValueError):
        extract_model(chunk("x"), HAVE, ontology, 1.5)


# -- normalization ---------------------------------------------------------------------


def test_duplicates_keep_earliest_provenance(aliases):
    early = Provenance("doc://a", 4, "spec", "2024-01-01T00:00:00Z")
    late = Provenance("doc://b", 0, "spec", "2024-06-01T00:00:00Z")
    out = normalize(
        [Candidate("SST 2", "suitable_for", "URLLC applications", 1.0, late),
         Candidate("SST_2", "suitable_for", "URLLC", 1.0, early)],
        aliases,
    )
    assert len(out) == 1
    assert out[0].provenance == early
    assert not out[0].predicted and out[0].score == 1.0


def test_unmappable_goes_to_rejects(aliases):
    report = ExtractionReport()
    prov = Provenance("doc://a", 0, "spec", "2024-01-01T00:00:00Z")
    assert normalize([Candidate("the thing", "suitable_for", "URLLC", 1.0, prov)], aliases, report) == []
    assert report.rejects[0][1] == "unmappable"


# -- whole documents -------------------------------------------------------------------


def test_bundled_docs_ingest(ontology, rules, aliases):
    from importlib import resources

    kg = KnowledgeGraph(ontology)
    docs = resources.files("kgrag.data").joinpath("docs")
    for name in ("sst_table.txt", "slice_profile.txt"):
        ingest_document(kg, f"doc://{name}", docs.joinpath(name).read_text("utf-8"), rules=rules,
                        aliases=aliases, backend=MockExtractor.bundled())
    keys = {t.key for t in kg.live_triples()}
    assert ("SST_2", "suitable_for", "URLLC") in keys
    assert ("SliceProfile", "have", "SST_2") in keys
    assert ("SliceProfile", "max_latency", "50ms") in keys
    for t in kg.live_triples():
        assert ontology.permits_triple(*t.key)
        assert t.provenance.doc_uri.startswith("doc://")


def test_reingest_is_idempotent(ontology, rules, aliases):
    kg = KnowledgeGraph(ontology)
    text = "SST 2 | URLLC\n\nThe slice profile has max latency 50 ms."
    ingest_document(kg, "doc://x", text, rules=rules, aliases=aliases)
    before, rev = kg.dumps(), kg.revision
    summary = ingest_document(kg, "doc://x", text, rules=rules, aliases=aliases)
    assert kg.dumps() == before and kg.revision == rev
    assert set(summary.outcomes) <= {InsertOutcome.DUPLICATE}
