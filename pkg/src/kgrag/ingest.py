"""Document intake: chunking, hybrid extraction and ontology normalization.

Rule hits and model-backend hits are unioned; conflicts between them are left
to the store's precedence rules at insert time.
"""
from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .errors import KGRAGError
from .kg_store import InsertOutcome, KnowledgeGraph, Provenance, Triple, format_ts
from .ontology import LITERAL_DOMAINS, Ontology

log = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK_CHARS = 2000
DEFAULT_MIN_CONFIDENCE = 0.5


class EmptyDocumentError(KGRAGError, ValueError):
    pass


class RuleError(KGRAGError, ValueError):
    pass


class BackendError(KGRAGError, RuntimeError):
    pass


@dataclass(frozen=True)
class DocumentChunk:
    doc_uri: str
    paragraph: int
    text: str
    source_family: str = "spec"
    revision_date: str = "1970-01-01T00:00:00Z"

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("chunk text must be non-empty")

    @property
    def provenance(self) -> Provenance:
        return Provenance(self.doc_uri, self.paragraph, self.source_family, self.revision_date)


_PARAGRAPH_BREAK = re.compile(r"\n[ \t]*\n\s*")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _split_long(text: str, limit: int) -> list[str]:
    """Pieces of ``text`` no longer than ``limit`` whose concatenation is ``text``."""
    cuts = [m.end() for m in _SENTENCE_END.finditer(text)]
    pieces: list[str] = []
    start = 0
    while len(text) - start > limit:
        end = max((c for c in cuts if start < c <= start + limit), default=None)
        if end is None:
            # no sentence boundary in reach: fall back to the last space, then a hard cut
            space = text.rfind(" ", start + 1, start + limit)
            end = space + 1 if space > start else start + limit
        pieces.append(text[start:end])
        start = end
    pieces.append(text[start:])
    return pieces


def chunk_document(
    doc_uri: str,
    raw_text: str,
    source_family: str = "spec",
    *,
    max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
    revision_date: str = "1970-01-01T00:00:00Z",
) -> list[DocumentChunk]:
    """Split on blank lines; overlong paragraphs split at sentence ends.

    Chunks are numbered consecutively from 0, so a split paragraph spans
    several paragraph numbers.
    """
    if not raw_text or not raw_text.strip():
        raise EmptyDocumentError(f"document {doc_uri!r} is empty")
    if max_chunk_chars < 1:
        raise ValueError("max_chunk_chars must be positive")
    revision_date = format_ts(revision_date)
    chunks: list[DocumentChunk] = []
    for para in _PARAGRAPH_BREAK.split(raw_text.strip()):
        para = para.strip()
        if not para:
            continue
        for piece in _split_long(para, max_chunk_chars):
            if piece.strip():
                chunks.append(
                    DocumentChunk(doc_uri, len(chunks), piece, source_family, revision_date)
                )
    return chunks


# -- aliases --------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]|_")
_LITERAL = re.compile(
    r"\s*(-?\d+(?:\.\d+)?)\s*(ms|msec|milliseconds?|mbps|mbit/s|deg|degrees?|°|%|percent)?\s*",
    re.IGNORECASE,
)
_UNIT_DOMAIN = {
    "ms": "duration_ms",
    "msec": "duration_ms",
    "millisecond": "duration_ms",
    "milliseconds": "duration_ms",
    "mbps": "rate_mbps",
    "mbit/s": "rate_mbps",
    "deg": "degrees",
    "degree": "degrees",
    "degrees": "degrees",
    "°": "degrees",
    "%": "percent",
    "percent": "percent",
}
_DOMAIN_SUFFIX = {"duration_ms": "ms", "rate_mbps": "Mbps", "degrees": "deg", "percent": "%", "integer": ""}


def fold(surface: str) -> str:
    return " ".join(_PUNCT.sub(" ", surface.casefold()).split())


class AliasTable:
    """Surface form -> canonical id, matched after case-fold and punctuation strip."""

    def __init__(self, mapping: Mapping[str, str], ontology: Ontology):
        self.ontology = ontology
        self._map: dict[str, str] = {}
        for surface, canonical in mapping.items():
            if ontology.type_of(canonical) is None:
                raise ValueError(f"alias {surface!r} points at {canonical!r}, which is no entity id")
            key = fold(surface)
            if self._map.get(key, canonical) != canonical:
                raise ValueError(f"alias {surface!r} maps to both {self._map[key]!r} and {canonical!r}")
            self._map[key] = canonical
        self._mention_re: re.Pattern[str] | None = None

    def __len__(self) -> int:
        return len(self._map)

    def items(self) -> list[tuple[str, str]]:
        return sorted(self._map.items())

    def with_entities(self, entity_ids: Iterable[str]) -> AliasTable:
        """Copy that also recognises the given ids and their display forms."""
        extra = dict(self._map)
        for eid in entity_ids:
            extra.setdefault(fold(eid), eid)
            extra.setdefault(fold(self.ontology.display(eid)), eid)
        return AliasTable(extra, self.ontology)

    def entity(self, surface: str) -> str | None:
        text = surface.strip()
        if self.ontology.type_of(text):
            return text
        return self._map.get(fold(text))

    def literal(self, relation: str, surface: str) -> str | None:
        domains = self.ontology.literal_domains_for(relation)
        if not domains:
            return None
        m = _LITERAL.fullmatch(surface)
        if m:
            number, unit = m.group(1), (m.group(2) or "").lower()
            domain = _UNIT_DOMAIN.get(unit, "integer")
            if domain == "integer" and "." in number:
                domain = None
            if domain in domains:
                return number + _DOMAIN_SUFFIX[domain]
        for domain in domains:
            if LITERAL_DOMAINS[domain][0].fullmatch(surface.strip()):
                return surface.strip()
        return None

    def canonical_object(self, relation: str, surface: str) -> str | None:
        ent = self.entity(surface)
        if ent is not None:
            return ent
        return self.literal(relation, surface)

    def find_mentions(self, text: str) -> set[str]:
        """Canonical ids whose surface forms occur as whole words in ``text``."""
        if self._mention_re is None:
            keys = sorted((k for k in self._map if k), key=len, reverse=True)
            self._mention_re = re.compile(
                r"(?<!\w)(" + "|".join(re.escape(k) for k in keys) + r")(?!\w)" if keys else r"(?!x)x"
            )
        folded = fold(text)
        found = {self._map[m.group(1)] for m in self._mention_re.finditer(folded)}
        # literal entity ids written verbatim (e.g. gNodeB-42) also count
        for token in re.findall(r"[\w:.-]+", text):
            token = token.rstrip(".")
            if self.ontology.type_of(token):
                found.add(token)
        return found

    def glossary(self) -> dict[str, str]:
        """Canonical id -> longest alias, used to expand abbreviations."""
        best: dict[str, str] = {}
        for surface, canonical in self._map.items():
            if surface == fold(canonical):
                continue
            if len(surface) > len(best.get(canonical, "")):
                best[canonical] = surface
        return best


def load_aliases(ontology: Ontology, path: str | Path | None = None) -> AliasTable:
    if path is None:
        text = resources.files("kgrag.data").joinpath("aliases.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    mapping = json.loads(text)
    if not isinstance(mapping, dict):
        raise ValueError("alias file must be a JSON object")
    return AliasTable(mapping, ontology)


# -- candidates -----------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    subject: str
    relation: str
    object: str
    confidence: float
    provenance: Provenance
    origin: str = "rule"


@dataclass
class ExtractionReport:
    schema_violations: int = 0
    below_threshold: int = 0
    rejects: list[tuple[Candidate, str]] = field(default_factory=list)


def _canonical(c: Candidate | tuple[str, str, str], aliases: AliasTable | None) -> tuple[str, str, str] | None:
    s, r, o = (c.subject, c.relation, c.object) if isinstance(c, Candidate) else c
    if aliases is None:
        return (s, r, o)
    cs = aliases.entity(s)
    co = aliases.canonical_object(r, o)
    if cs is None or co is None:
        return None
    return (cs, r, co)


def _passes_schema(c: Candidate, ontology: Ontology, aliases: AliasTable | None) -> bool:
    key = _canonical(c, aliases)
    return key is not None and ontology.permits_triple(*key)


# -- rule extraction ------------------------------------------------------------


@dataclass(frozen=True)
class ExtractionRule:
    pattern: str
    relation: str
    subject: str
    object: str
    name: str = ""
    regex: re.Pattern[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "regex", re.compile(self.pattern))
        except re.error as exc:
            raise RuleError(f"rule {self.name or self.pattern!r}: {exc}") from None

    def fill(self, m: re.Match[str]) -> tuple[str, str]:
        groups = {k: v for k, v in m.groupdict().items() if v is not None}
        try:
            return self.subject.format(**groups).strip(), self.object.format(**groups).strip()
        except KeyError as exc:
            raise RuleError(f"rule {self.name!r} references unbound slot {exc}") from None


def load_rules(ontology: Ontology, path: str | Path | None = None) -> list[ExtractionRule]:
    if path is None:
        text = resources.files("kgrag.data").joinpath("rules.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    items = json.loads(text)
    rules = []
    for i, d in enumerate(items):
        slots = d.get("slots", {})
        if "subject" not in slots or "object" not in slots:
            raise RuleError(f"rule {i}: slots need subject and object")
        rule = ExtractionRule(
            pattern=d["pattern"],
            relation=d["relation"],
            subject=slots["subject"],
            object=slots["object"],
            name=d.get("name", f"rule{i}"),
        )
        if not ontology.has_relation(rule.relation):
            raise RuleError(f"rule {rule.name!r}: unknown relation {rule.relation!r}")
        rules.append(rule)
    return rules


def extract_rules(
    chunk: DocumentChunk,
    rules: Sequence[ExtractionRule],
    ontology: Ontology,
    aliases: AliasTable | None = None,
) -> list[Candidate]:
    out: list[Candidate] = []
    seen: set[tuple[str, str, str]] = set()
    for rule in rules:
        for m in rule.regex.finditer(chunk.text):
            subj, obj = rule.fill(m)
            cand = Candidate(subj, rule.relation, obj, 1.0, chunk.provenance, origin=rule.name)
            key = _canonical(cand, aliases)
            if key is None or not ontology.permits_triple(*key) or key in seen:
                continue
            seen.add(key)
            out.append(cand)
    return out


# -- model-backed extraction ---------------------------------------------------------


class ExtractorBackend(Protocol):
    def extract(self, chunk: DocumentChunk) -> list[Candidate]: ...


class MockExtractor:
    """Deterministic keyword-keyed extractor standing in for an NER model."""

    def __init__(self, entries: Sequence[Mapping[str, Any]]):
        self.entries = [
            (str(e["when"]).casefold(), [tuple(x) for x in e["emit"]]) for e in entries
        ]

    @classmethod
    def bundled(cls) -> MockExtractor:
        text = resources.files("kgrag.data").joinpath("extractor_mock.json").read_text("utf-8")
        return cls(json.loads(text))

    def extract(self, chunk: DocumentChunk) -> list[Candidate]:
        text = chunk.text.casefold()
        out = []
        for keyword, emits in self.entries:
            if keyword in text:
                for s, r, o, conf in emits:
                    out.append(Candidate(s, r, o, float(conf), chunk.provenance, origin="model"))
        return out


class HTTPExtractor:
    """Remote extractor: POST chunk JSON, expect ``{"candidates": [...]}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def extract(self, chunk: DocumentChunk) -> list[Candidate]:
        body = json.dumps(
            {"doc_uri": chunk.doc_uri, "paragraph": chunk.paragraph, "text": chunk.text}
        ).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            return [
                Candidate(c["subject"], c["relation"], c["object"], float(c["confidence"]),
                          chunk.provenance, origin="model")
                for c in payload["candidates"]
            ]
        except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
            raise BackendError(f"extractor failed on {chunk.doc_uri}#{chunk.paragraph}: {exc}") from exc


def extract_model(
    chunk: DocumentChunk,
    backend: ExtractorBackend,
    ontology: Ontology,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    aliases: AliasTable | None = None,
    report: ExtractionReport | None = None,
) -> list[Candidate]:
    if not 0.0 <= min_confidence <= 1.0:
        raise ValueError("min_confidence must lie in [0, 1]")
    report = report if report is not None else ExtractionReport()
    try:
        raw = backend.extract(chunk)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"extractor failed on {chunk.doc_uri}#{chunk.paragraph}: {exc}") from exc
    kept = []
    for c in raw:
        if not _passes_schema(c, ontology, aliases):
            report.schema_violations += 1
            report.rejects.append((c, "schema"))
            log.debug("schema-violating candidate %s from %s", (c.subject, c.relation, c.object), chunk.doc_uri)
            continue
        if c.confidence < min_confidence:
            report.below_threshold += 1
            continue
        kept.append(c)
    return kept


# -- normalization ----------------------------------------------------------------


def _prov_key(p: Provenance) -> tuple[str, str, int]:
    return (p.revision_date, p.doc_uri, p.paragraph)


def normalize(
    candidates: Iterable[Candidate],
    aliases: AliasTable,
    report: ExtractionReport | None = None,
) -> list[Triple]:
    """Canonicalize surface forms and merge duplicates by triple id.

    Duplicates keep the earliest provenance (revision date, then document,
    then paragraph).  Unmappable candidates go to ``report.rejects``.
    """
    report = report if report is not None else ExtractionReport()
    ontology = aliases.ontology
    best: dict[str, Triple] = {}
    for c in candidates:
        key = _canonical(c, aliases)
        if key is None:
            report.rejects.append((c, "unmappable"))
            continue
        if not ontology.permits_triple(*key):
            report.schema_violations += 1
            report.rejects.append((c, "schema"))
            continue
        t = Triple(*key, provenance=c.provenance, valid_from=c.provenance.revision_date)
        prior = best.get(t.id)
        if prior is None or _prov_key(t.provenance) < _prov_key(prior.provenance):
            best[t.id] = t
    return sorted(best.values(), key=lambda t: _prov_key(t.provenance) + (t.id,))


@dataclass
class IngestSummary:
    doc_uri: str
    chunks: int = 0
    candidates: int = 0
    triples: int = 0
    outcomes: Counter = field(default_factory=Counter)
    schema_violations: int = 0
    rejects: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_uri": self.doc_uri,
            "chunks": self.chunks,
            "candidates": self.candidates,
            "triples": self.triples,
            "outcomes": {k.value: v for k, v in sorted(self.outcomes.items())},
            "schema_violations": self.schema_violations,
            "rejects": self.rejects,
        }


def ingest_document(
    kg: KnowledgeGraph,
    doc_uri: str,
    text: str,
    *,
    rules: Sequence[ExtractionRule],
    aliases: AliasTable,
    source_family: str = "spec",
    revision_date: str = "1970-01-01T00:00:00Z",
    backend: ExtractorBackend | None = None,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
) -> IngestSummary:
    chunks = chunk_document(
        doc_uri, text, source_family, max_chunk_chars=max_chunk_chars, revision_date=revision_date
    )
    report = ExtractionReport()
    candidates: list[Candidate] = []
    for chunk in chunks:
        candidates.extend(extract_rules(chunk, rules, kg.ontology, aliases))
        if backend is not None:
            candidates.extend(extract_model(chunk, backend, kg.ontology, min_confidence, aliases, report))
    triples = normalize(candidates, aliases, report)
    outcomes: Counter[InsertOutcome] = kg.insert_many(triples)
    return IngestSummary(
        doc_uri=doc_uri,
        chunks=len(chunks),
        candidates=len(candidates),
        triples=len(triples),
        outcomes=outcomes,
        schema_violations=report.schema_violations,
        rejects=len(report.rejects),
    )
