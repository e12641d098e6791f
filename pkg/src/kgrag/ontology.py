"""Telecom schema registry and triple validation.

The ontology declares entity types, relation types and the permitted
``(head, relation, tail)`` signatures.  Tails are either entity types or one
of the literal domains below.  Entity identifiers are typed by the
``id_pattern`` of their entity type, so a triple can be checked without a
separate entity catalogue.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .errors import KGRAGError

SEMANTIC_CLASSES = (
    "structural",
    "qos_attribute",
    "slicing_constraint",
    "latency_threshold",
    "operational",
)

# value regex and unit suffix per literal domain
LITERAL_DOMAINS: Mapping[str, tuple[re.Pattern[str], str]] = MappingProxyType(
    {
        "integer": (re.compile(r"-?\d+"), ""),
        "duration_ms": (re.compile(r"(\d+(?:\.\d+)?)ms"), "ms"),
        "rate_mbps": (re.compile(r"(\d+(?:\.\d+)?)Mbps"), "Mbps"),
        "degrees": (re.compile(r"(-?\d+(?:\.\d+)?)deg"), "deg"),
        "percent": (re.compile(r"(\d+(?:\.\d+)?)%"), "%"),
        "text": (re.compile(r"[^\n]+"), ""),
    }
)

_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_]*")


class OntologyError(KGRAGError, ValueError):
    """Malformed ontology document."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


class DanglingReferenceError(OntologyError):
    def __init__(self, name: str, location: str):
        super().__init__(f"undeclared type {name!r}", location)
        self.name = name


class UnknownRelationError(KGRAGError, KeyError):
    def __str__(self) -> str:
        return f"unknown relation {self.args[0]!r}"


@dataclass(frozen=True)
class EntityType:
    name: str
    description: str = ""
    id_pattern: str | None = None
    display: str | None = None

    def matches(self, entity_id: str) -> re.Match[str] | None:
        if self.id_pattern is None:
            return None
        return re.fullmatch(self.id_pattern, entity_id)


@dataclass(frozen=True)
class RelationType:
    name: str
    functional: bool = False
    semantic_class: str = "operational"
    description: str = ""


@dataclass(frozen=True)
class Signature:
    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class Ontology:
    entity_types: tuple[EntityType, ...] = ()
    relation_types: tuple[RelationType, ...] = ()
    signatures: tuple[Signature, ...] = ()
    version: int = 1
    _entities: Mapping[str, EntityType] = field(init=False, repr=False, compare=False)
    _relations: Mapping[str, RelationType] = field(init=False, repr=False, compare=False)
    _sig_set: frozenset[Signature] = field(init=False, repr=False, compare=False)
    _by_head_rel: Mapping[tuple[str, str], tuple[str, ...]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        entities = {e.name: e for e in self.entity_types}
        relations = {r.name: r for r in self.relation_types}
        by_head_rel: dict[tuple[str, str], list[str]] = {}
        for sig in self.signatures:
            by_head_rel.setdefault((sig.head, sig.relation), []).append(sig.tail)
        object.__setattr__(self, "_entities", MappingProxyType(entities))
        object.__setattr__(self, "_relations", MappingProxyType(relations))
        object.__setattr__(self, "_sig_set", frozenset(self.signatures))
        object.__setattr__(
            self,
            "_by_head_rel",
            MappingProxyType({k: tuple(v) for k, v in by_head_rel.items()}),
        )
        _check_closure(self)

    # -- registry --------------------------------------------------------

    def entity_type(self, name: str) -> EntityType | None:
        return self._entities.get(name)

    def relation(self, name: str) -> RelationType:
        try:
            return self._relations[name]
        except KeyError:
            raise UnknownRelationError(name) from None

    def has_relation(self, name: str) -> bool:
        return name in self._relations

    def is_functional(self, relation: str) -> bool:
        rel = self._relations.get(relation)
        return bool(rel and rel.functional)

    def permits(self, head_type: str, relation: str, tail_type: str) -> bool:
        return Signature(head_type, relation, tail_type) in self._sig_set

    def classify_relation(self, relation: str) -> str:
        return self.relation(relation).semantic_class

    # -- identifier typing -----------------------------------------------

    def type_of(self, entity_id: str) -> str | None:
        """Entity type whose ``id_pattern`` matches, first declared wins."""
        for et in self.entity_types:
            if et.matches(entity_id):
                return et.name
        return None

    def resolve_tail(self, head_type: str, relation: str, obj: str) -> str | None:
        """Tail type or literal domain under which ``obj`` fits a signature."""
        tails = self._by_head_rel.get((head_type, relation), ())
        literal_hit = None
        for tail in tails:
            if tail in LITERAL_DOMAINS:
                if literal_hit is None and LITERAL_DOMAINS[tail][0].fullmatch(obj):
                    literal_hit = tail
            elif self.type_of(obj) == tail:
                return tail
        return literal_hit

    def signature_for(self, subject: str, relation: str, obj: str) -> Signature | None:
        head = self.type_of(subject)
        if head is None:
            return None
        tail = self.resolve_tail(head, relation, obj)
        return None if tail is None else Signature(head, relation, tail)

    def permits_triple(self, subject: str, relation: str, obj: str) -> bool:
        return self.signature_for(subject, relation, obj) is not None

    def is_literal_object(self, subject: str, relation: str, obj: str) -> bool:
        sig = self.signature_for(subject, relation, obj)
        return sig is not None and sig.tail in LITERAL_DOMAINS

    def literal_domains_for(self, relation: str) -> list[str]:
        return sorted(
            {s.tail for s in self.signatures if s.relation == relation and s.tail in LITERAL_DOMAINS}
        )

    def display(self, entity_id: str) -> str:
        """Human rendering of an entity id, e.g. ``SST_2`` -> ``SST Type 2``."""
        for et in self.entity_types:
            m = et.matches(entity_id)
            if m:
                if et.display:
                    return et.display.format(id=entity_id, **m.groupdict())
                return entity_id
        return entity_id

    # -- mutation (new snapshot each time) -------------------------------

    def with_entity_type(self, et: EntityType) -> Ontology:
        if et.name in self._entities:
            raise OntologyError(f"duplicate entity type {et.name!r}")
        return replace(self, entity_types=self.entity_types + (et,), version=self.version + 1)

    def with_relation_type(self, rt: RelationType) -> Ontology:
        if rt.name in self._relations:
            raise OntologyError(f"duplicate relation type {rt.name!r}")
        return replace(self, relation_types=self.relation_types + (rt,), version=self.version + 1)

    def with_signature(self, sig: Signature) -> Ontology:
        if sig in self._sig_set:
            raise OntologyError(f"duplicate signature {sig}")
        return replace(self, signatures=self.signatures + (sig,), version=self.version + 1)

    def to_dict(self) -> dict[str, Any]:
        def entity(e: EntityType) -> dict[str, Any]:
            d: dict[str, Any] = {"name": e.name, "description": e.description}
            if e.id_pattern is not None:
                d["id_pattern"] = e.id_pattern
            if e.display is not None:
                d["display"] = e.display
            return d

        return {
            "version": self.version,
            "entity_types": [entity(e) for e in self.entity_types],
            "relation_types": [
                {
                    "name": r.name,
                    "functional": r.functional,
                    "semantic_class": r.semantic_class,
                    "description": r.description,
                }
                for r in self.relation_types
            ],
            "signatures": [
                {"head": s.head, "relation": s.relation, "tail": s.tail} for s in self.signatures
            ],
        }


def _check_closure(o: Ontology) -> None:
    seen: set[str] = set()
    for i, e in enumerate(o.entity_types):
        loc = f"entity_types[{i}].name"
        if not isinstance(e.name, str) or not _IDENT.fullmatch(e.name):
            raise OntologyError(f"invalid identifier {e.name!r}", loc)
        if e.name in seen:
            raise OntologyError(f"duplicate entity type {e.name!r}", loc)
        if e.name in LITERAL_DOMAINS:
            raise OntologyError(f"{e.name!r} collides with a literal domain", loc)
        if e.id_pattern is not None:
            try:
                re.compile(e.id_pattern)
            except re.error as exc:
                raise OntologyError(f"bad id_pattern: {exc}", f"entity_types[{i}].id_pattern") from None
        seen.add(e.name)
    seen.clear()
    for i, r in enumerate(o.relation_types):
        loc = f"relation_types[{i}]"
        if not isinstance(r.name, str) or not _IDENT.fullmatch(r.name):
            raise OntologyError(f"invalid identifier {r.name!r}", loc + ".name")
        if r.name in seen:
            raise OntologyError(f"duplicate relation type {r.name!r}", loc + ".name")
        if r.semantic_class not in SEMANTIC_CLASSES:
            raise OntologyError(f"unknown semantic_class {r.semantic_class!r}", loc + ".semantic_class")
        seen.add(r.name)
    sigs: set[Signature] = set()
    for i, s in enumerate(o.signatures):
        loc = f"signatures[{i}]"
        if s.head not in o._entities:
            raise DanglingReferenceError(s.head, loc + ".head")
        if s.relation not in o._relations:
            raise DanglingReferenceError(s.relation, loc + ".relation")
        if s.tail not in o._entities and s.tail not in LITERAL_DOMAINS:
            raise DanglingReferenceError(s.tail, loc + ".tail")
        if s in sigs:
            raise OntologyError(f"duplicate signature ({s.head}, {s.relation}, {s.tail})", loc)
        sigs.add(s)


def _require(d: Mapping[str, Any], key: str, kind: type, loc: str) -> Any:
    if key not in d:
        raise OntologyError(f"missing field {key!r}", loc)
    value = d[key]
    if not isinstance(value, kind):
        raise OntologyError(f"field {key!r} must be {kind.__name__}", f"{loc}.{key}")
    return value


def ontology_from_dict(doc: Any) -> Ontology:
    if not isinstance(doc, dict):
        raise OntologyError("top level must be an object")
    for key in ("entity_types", "relation_types", "signatures"):
        _require(doc, key, list, "<root>")
    version = doc.get("version", 1)
    if not isinstance(version, int) or version < 1:
        raise OntologyError("version must be a positive integer", "version")

    entity_types = []
    for i, e in enumerate(doc["entity_types"]):
        loc = f"entity_types[{i}]"
        if not isinstance(e, dict):
            raise OntologyError("expected object", loc)
        entity_types.append(
            EntityType(
                name=_require(e, "name", str, loc),
                description=e.get("description", ""),
                id_pattern=e.get("id_pattern"),
                display=e.get("display"),
            )
        )
    relation_types = []
    for i, r in enumerate(doc["relation_types"]):
        loc = f"relation_types[{i}]"
        if not isinstance(r, dict):
            raise OntologyError("expected object", loc)
        relation_types.append(
            RelationType(
                name=_require(r, "name", str, loc),
                functional=bool(r.get("functional", False)),
                semantic_class=_require(r, "semantic_class", str, loc),
                description=r.get("description", ""),
            )
        )
    signatures = []
    for i, s in enumerate(doc["signatures"]):
        loc = f"signatures[{i}]"
        if not isinstance(s, dict):
            raise OntologyError("expected object", loc)
        signatures.append(
            Signature(
                head=_require(s, "head", str, loc),
                relation=_require(s, "relation", str, loc),
                tail=_require(s, "tail", str, loc),
            )
        )
    return Ontology(tuple(entity_types), tuple(relation_types), tuple(signatures), version)


def load_ontology(source: str | Path | None = None) -> Ontology:
    """Load an ontology JSON file; ``None`` loads the bundled telecom ontology."""
    if source is None:
        text = resources.files("kgrag.data").joinpath("ontology.json").read_text("utf-8")
        where = "<bundled ontology.json>"
    else:
        text = Path(source).read_text("utf-8")
        where = str(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OntologyError(exc.msg, f"{where}:{exc.lineno}:{exc.colno}") from None
    return ontology_from_dict(doc)


def iter_entity_names(o: Ontology) -> Iterable[str]:
    return (e.name for e in o.entity_types)
