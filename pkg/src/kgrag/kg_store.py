"""Provenance-bearing triple store.

Triples are content addressed (``id`` is a 128-bit hash of subject, relation
and object).  Updates never delete extracted facts: a newer extracted value
on a functional relation marks the prior triple as superseded.  Predicted
triples are the exception; they are dropped when an extracted fact or a
higher-scoring prediction takes their slot.

Writers go through :class:`KnowledgeGraph`, which serializes mutation behind
one lock.  Readers use :meth:`KnowledgeGraph.snapshot`, an immutable
:class:`KGView` tagged with the revision it reflects.
"""
from __future__ import annotations

import enum
import hashlib
import io
import json
import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping

from .errors import KGRAGError
from .ontology import LITERAL_DOMAINS, Ontology, Signature

SOURCE_FAMILIES = ("spec", "vendor_doc", "log", "telemetry", "synthetic")

RECORD_FIELDS = (
    "subject",
    "relation",
    "object",
    "predicted",
    "score",
    "doc_uri",
    "paragraph",
    "source_family",
    "revision_date",
    "valid_from",
)


class TimestampError(KGRAGError, ValueError):
    pass


class SchemaViolation(KGRAGError, ValueError):
    pass


class StoreFormatError(KGRAGError, ValueError):
    pass


def parse_ts(value: str | datetime) -> datetime:
    """Parse an ISO-8601 timestamp into an aware UTC datetime."""
    if isinstance(value, datetime):
        dt = value
    else:
        if not isinstance(value, str) or not value:
            raise TimestampError(f"malformed timestamp {value!r}")
        text = value[:-1] + "+00:00" if value.endswith(("Z", "z")) else value
        try:
            dt = datetime.fromisoformat(text)
        except ValueError:
            raise TimestampError(f"malformed timestamp {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_ts(value: str | datetime) -> str:
    dt = parse_ts(value)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        base += f".{dt.microsecond:06d}".rstrip("0")
    return base + "Z"


def triple_id(subject: str, relation: str, obj: str) -> str:
    canonical = json.dumps([subject, relation, obj], ensure_ascii=False, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=16).hexdigest()


@dataclass(frozen=True)
class Provenance:
    doc_uri: str
    paragraph: int = 0
    source_family: str = "spec"
    revision_date: str = "1970-01-01T00:00:00Z"

    def __post_init__(self) -> None:
        if not isinstance(self.doc_uri, str) or not self.doc_uri:
            raise ValueError("provenance doc_uri must be non-empty")
        if isinstance(self.paragraph, bool) or not isinstance(self.paragraph, int) or self.paragraph < 0:
            raise ValueError(f"paragraph must be a non-negative integer, got {self.paragraph!r}")
        if self.source_family not in SOURCE_FAMILIES:
            raise ValueError(f"unknown source_family {self.source_family!r}")
        object.__setattr__(self, "revision_date", format_ts(self.revision_date))


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str
    provenance: Provenance
    valid_from: str
    predicted: bool = False
    score: float = 1.0
    superseded_by: str | None = None
    id: str = field(init=False)
    valid_from_dt: datetime = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("subject", "relation", "object"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"triple {name} must be a non-empty string")
        dt = parse_ts(self.valid_from)
        object.__setattr__(self, "valid_from", format_ts(dt))
        object.__setattr__(self, "valid_from_dt", dt)
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if not self.predicted and self.score != 1.0:
            raise ValueError("extracted triples carry score 1.0")
        object.__setattr__(self, "id", triple_id(self.subject, self.relation, self.object))

    @property
    def live(self) -> bool:
        return self.superseded_by is None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)

    def to_record(self, with_superseded: bool = False) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "subject": self.subject,
            "relation": self.relation,
            "object": self.object,
            "predicted": self.predicted,
            "score": self.score,
            "doc_uri": self.provenance.doc_uri,
            "paragraph": self.provenance.paragraph,
            "source_family": self.provenance.source_family,
            "revision_date": self.provenance.revision_date,
            "valid_from": self.valid_from,
        }
        if with_superseded:
            rec["superseded_by"] = self.superseded_by
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> Triple:
        missing = [k for k in RECORD_FIELDS if k not in rec]
        if missing:
            raise StoreFormatError(f"triple record missing fields {missing}")
        return cls(
            subject=rec["subject"],
            relation=rec["relation"],
            object=rec["object"],
            predicted=bool(rec["predicted"]),
            score=rec["score"],
            provenance=Provenance(
                doc_uri=rec["doc_uri"],
                paragraph=rec["paragraph"],
                source_family=rec["source_family"],
                revision_date=rec["revision_date"],
            ),
            valid_from=rec["valid_from"],
            superseded_by=rec.get("superseded_by"),
        )


class InsertOutcome(str, enum.Enum):
    INSERTED = "inserted"
    SUPERSEDED_PRIOR = "superseded_prior"
    REJECTED_CONFLICT = "rejected_conflict"
    REJECTED_SCHEMA = "rejected_schema"
    DUPLICATE = "duplicate"

    @property
    def mutated(self) -> bool:
        return self in (InsertOutcome.INSERTED, InsertOutcome.SUPERSEDED_PRIOR)


class KGView:
    """Read API shared by the live store and its immutable snapshots."""

    ontology: Ontology
    revision: int
    _triples: Mapping[str, Triple]
    _sig: Mapping[str, Signature]
    _out: Mapping[str, Any]
    _in: Mapping[str, Any]
    _by_rel: Mapping[str, Any]
    _by_sr: Mapping[tuple[str, str], Any]

    @property
    def ontology_version(self) -> int:
        return self.ontology.version

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, tid: object) -> bool:
        return tid in self._triples

    def get(self, tid: str) -> Triple | None:
        return self._triples.get(tid)

    def live_ids(self) -> list[str]:
        return sorted(self._sig)

    def live_count(self) -> int:
        return len(self._sig)

    def live_triples(self) -> list[Triple]:
        return [self._triples[i] for i in sorted(self._sig)]

    def all_triples(self) -> list[Triple]:
        return [self._triples[i] for i in sorted(self._triples)]

    def signature(self, tid: str) -> Signature:
        return self._sig[tid]

    def semantic_class(self, tid: str) -> str:
        return self.ontology.classify_relation(self._sig[tid].relation)

    def is_literal(self, tid: str) -> bool:
        return self._sig[tid].tail in LITERAL_DOMAINS

    def entities_of(self, t: Triple) -> tuple[str, ...]:
        sig = self._sig.get(t.id) or self.ontology.signature_for(*t.key)
        if sig is None or sig.tail in LITERAL_DOMAINS:
            return (t.subject,)
        return (t.subject, t.object)

    def entities(self) -> set[str]:
        out: set[str] = set()
        for tid in self._sig:
            out.update(self.entities_of(self._triples[tid]))
        return out

    def has_entity(self, entity: str) -> bool:
        return bool(self._out.get(entity) or self._in.get(entity))

    def lookup(
        self,
        subject: str | None = None,
        relation: str | None = None,
        object: str | None = None,
    ) -> list[Triple]:
        """Live triples matching every bound field, ordered by id."""
        if subject is None and relation is None and object is None:
            raise ValueError("lookup needs at least one bound field")
        if subject is not None and relation is not None:
            ids = self._by_sr.get((subject, relation), ())
        elif subject is not None:
            ids = self._out.get(subject, ())
        elif object is not None:
            ids = self._in.get(object, ())
        else:
            ids = self._by_rel.get(relation, ())
        hits = []
        for tid in ids:
            t = self._triples[tid]
            if (
                (subject is None or t.subject == subject)
                and (relation is None or t.relation == relation)
                and (object is None or t.object == object)
            ):
                hits.append(t)
        hits.sort(key=lambda t: t.id)
        return hits

    def neighborhood(self, seed: str, hops: int = 1) -> list[Triple]:
        """Live triples within ``hops`` undirected traversals of ``seed``.

        Literal objects are attribute values and are never expanded.
        """
        if hops < 1:
            raise ValueError("hops must be >= 1")
        visited = {seed}
        frontier = {seed}
        found: set[str] = set()
        for _ in range(hops):
            nxt: set[str] = set()
            for node in frontier:
                for tid in (*self._out.get(node, ()), *self._in.get(node, ())):
                    found.add(tid)
                    if self.is_literal(tid):
                        continue
                    t = self._triples[tid]
                    other = t.object if t.subject == node else t.subject
                    if other not in visited:
                        visited.add(other)
                        nxt.add(other)
            frontier = nxt
        return [self._triples[i] for i in sorted(found)]

    def latest_valid_from(self) -> str | None:
        if not self._triples:
            return None
        return format_ts(max(t.valid_from_dt for t in self._triples.values()))

    def dumps(self) -> str:
        buf = io.StringIO()
        write_triples(buf, self.all_triples(), with_superseded=True)
        return buf.getvalue()


class Snapshot(KGView):
    """Frozen copy of a store at one revision."""

    def __init__(self, kg: KnowledgeGraph):
        self.ontology = kg.ontology
        self.revision = kg.revision
        self._triples = dict(kg._triples)
        self._sig = dict(kg._sig)
        self._out = {k: frozenset(v) for k, v in kg._out.items() if v}
        self._in = {k: frozenset(v) for k, v in kg._in.items() if v}
        self._by_rel = {k: frozenset(v) for k, v in kg._by_rel.items() if v}
        self._by_sr = {k: frozenset(v) for k, v in kg._by_sr.items() if v}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return self.revision == other.revision and self._triples == other._triples

    __hash__ = None  # type: ignore[assignment]


class KnowledgeGraph(KGView):
    def __init__(self, ontology: Ontology):
        self.ontology = ontology
        self.revision = 0
        self._triples: dict[str, Triple] = {}
        self._sig: dict[str, Signature] = {}
        self._out: dict[str, set[str]] = {}
        self._in: dict[str, set[str]] = {}
        self._by_rel: dict[str, set[str]] = {}
        self._by_sr: dict[tuple[str, str], set[str]] = {}
        self._lock = threading.RLock()
        self._depth = 0
        self._dirty = False
        self._mutations = 0
        self._snap: tuple[int, Snapshot] | None = None
        self.last_event_at: datetime | None = None

    # -- batching ----------------------------------------------------------

    @contextmanager
    def batch(self) -> Iterator[KnowledgeGraph]:
        """Group mutations so the revision advances once."""
        with self._lock:
            self._depth += 1
            try:
                yield self
            finally:
                self._depth -= 1
                if self._depth == 0:
                    self._close_batch()

    def _close_batch(self) -> None:
        if self._dirty:
            self.revision += 1
            self._dirty = False

    def _touch(self) -> None:
        self._dirty = True
        self._mutations += 1
        if self._depth == 0:
            self._close_batch()

    def snapshot(self) -> Snapshot:
        with self._lock:
            if self._snap is None or self._snap[0] != self._mutations:
                self._snap = (self._mutations, Snapshot(self))
            return self._snap[1]

    # -- index maintenance ------------------------------------------------

    def _link(self, t: Triple, sig: Signature) -> None:
        self._triples[t.id] = t
        self._sig[t.id] = sig
        self._out.setdefault(t.subject, set()).add(t.id)
        self._in.setdefault(t.object, set()).add(t.id)
        self._by_rel.setdefault(t.relation, set()).add(t.id)
        self._by_sr.setdefault((t.subject, t.relation), set()).add(t.id)

    def _unlink(self, t: Triple) -> None:
        del self._sig[t.id]
        self._out[t.subject].discard(t.id)
        self._in[t.object].discard(t.id)
        self._by_rel[t.relation].discard(t.id)
        self._by_sr[(t.subject, t.relation)].discard(t.id)

    def _supersede(self, prior: Triple, by: Triple) -> None:
        self._unlink(prior)
        self._triples[prior.id] = replace(prior, superseded_by=by.id)

    def _retract(self, prior: Triple) -> None:
        self._unlink(prior)
        del self._triples[prior.id]

    # -- mutation ---------------------------------------------------------

    def insert(self, t: Triple, *, strict: bool = False) -> InsertOutcome:
        if not t.live:
            raise ValueError("cannot insert a triple that is already superseded")
        with self._lock:
            outcome = self._insert(t, strict)
            if outcome.mutated:
                self._touch()
            return outcome

    def insert_many(self, triples: Iterable[Triple]) -> Counter[InsertOutcome]:
        counts: Counter[InsertOutcome] = Counter()
        with self.batch():
            for t in triples:
                counts[self.insert(t)] += 1
        return counts

    def _insert(self, t: Triple, strict: bool) -> InsertOutcome:
        sig = self.ontology.signature_for(*t.key)
        if sig is None:
            if strict:
                head = self.ontology.type_of(t.subject) or "?"
                tail = self.ontology.type_of(t.object) or "literal"
                raise SchemaViolation(
                    f"no signature ({head}, {t.relation}, {tail}) for triple {t.key}"
                )
            return InsertOutcome.REJECTED_SCHEMA

        existing = self._triples.get(t.id)
        if existing is not None:
            if existing.live:
                if existing.predicted and not t.predicted:
                    self._unlink(existing)
                    self._link(t, sig)
                    return InsertOutcome.INSERTED
                return InsertOutcome.DUPLICATE
            if t.predicted:
                return InsertOutcome.REJECTED_CONFLICT

        prior = None
        if self.ontology.is_functional(t.relation):
            for tid in self._by_sr.get((t.subject, t.relation), ()):
                if tid != t.id:
                    prior = self._triples[tid]
                    break

        if prior is None:
            self._link(t, sig)
            return InsertOutcome.INSERTED

        if not t.predicted and not prior.predicted:
            if t.valid_from_dt > prior.valid_from_dt:
                self._supersede(prior, t)
                self._link(t, sig)
                return InsertOutcome.SUPERSEDED_PRIOR
            return InsertOutcome.REJECTED_CONFLICT
        if not t.predicted:
            self._retract(prior)
            self._link(t, sig)
            return InsertOutcome.SUPERSEDED_PRIOR
        if not prior.predicted:
            return InsertOutcome.REJECTED_CONFLICT
        if t.score > prior.score:
            self._retract(prior)
            self._link(t, sig)
            return InsertOutcome.SUPERSEDED_PRIOR
        return InsertOutcome.REJECTED_CONFLICT

    def restore(self, triples: Iterable[Triple]) -> None:
        """Load a store dump verbatim, including superseded triples."""
        with self._lock:
            if self._triples:
                raise StoreFormatError("restore requires an empty store")
            items = list(triples)
            pending: dict[str, Triple] = {}
            for t in items:
                if t.id in pending:
                    raise StoreFormatError(f"duplicate triple {t.key}")
                pending[t.id] = t
            for t in items:
                sig = self.ontology.signature_for(*t.key)
                if sig is None:
                    raise SchemaViolation(f"dump triple {t.key} violates the ontology")
                if t.live:
                    self._link(t, sig)
                    continue
                succ = pending.get(t.superseded_by or "")
                if (
                    succ is None
                    or (succ.subject, succ.relation) != (t.subject, t.relation)
                    or succ.valid_from_dt <= t.valid_from_dt
                ):
                    raise StoreFormatError(f"bad superseded_by on {t.key}")
                self._triples[t.id] = t
            if items:
                self._touch()


# -- persistence ------------------------------------------------------------


def write_triples(fh: IO[str], triples: Iterable[Triple], *, with_superseded: bool = False) -> int:
    n = 0
    for t in triples:
        fh.write(json.dumps(t.to_record(with_superseded), ensure_ascii=False) + "\n")
        n += 1
    return n


def iter_records(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreFormatError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise StoreFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def read_triples(path: str | Path) -> list[Triple]:
    out = []
    for lineno, rec in iter_records(path):
        try:
            out.append(Triple.from_record(rec))
        except (ValueError, TypeError) as exc:
            raise StoreFormatError(f"{path}:{lineno}: {exc}") from None
    return out


EVENT_URI_PREFIX = "log://events/"


def load_store(path: str | Path, ontology: Ontology) -> KnowledgeGraph:
    """Build a store from a triple file or restore it from a dump.

    Files whose records carry ``superseded_by`` are dumps and are restored
    verbatim; plain triple files are inserted in file order.
    """
    records = list(iter_records(path))
    kg = KnowledgeGraph(ontology)
    try:
        triples = [Triple.from_record(rec) for _, rec in records]
    except (ValueError, TypeError) as exc:
        raise StoreFormatError(f"{path}: {exc}") from None
    if records and all("superseded_by" in rec for _, rec in records):
        kg.restore(triples)
    else:
        kg.insert_many(triples)
    # the event watermark is not stored; recover it from event-derived triples
    stamps = [parse_ts(t.valid_from) for t in triples if t.provenance.doc_uri.startswith(EVENT_URI_PREFIX)]
    kg.last_event_at = max(stamps) if stamps else None
    return kg


def dump_store(kg: KGView, path: str | Path) -> int:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        return write_triples(fh, kg.all_triples(), with_superseded=True)
