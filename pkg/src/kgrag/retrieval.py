"""Dual-encoder triple retrieval with ontology-aware composite scoring.

Each live triple is verbalized and embedded by the triple-side encoder.  A
query is embedded by the query-side encoder, pre-classified into one of the
ontology's semantic classes, and every indexed triple is scored as::

    total = w_sim * cosine + w_ont * [class matches] + w_ctx * entity overlap

Ranking is exhaustive (no approximate search), so results are exact.
"""
from __future__ import annotations

import hashlib
import json
import re
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .errors import KGRAGError
from .kg_store import KGView, Triple
from .ontology import SEMANTIC_CLASSES, Ontology
from .verbalizer import TemplateSet, verbalize

# scores are rounded before ranking so equal real-valued scores tie exactly
SCORE_DECIMALS = 12


class DimensionMismatch(KGRAGError, ValueError):
    pass


class Encoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


_WORD = re.compile(r"[a-z0-9]+")


@lru_cache(maxsize=1 << 16)
def _bucket(feature: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        feature.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")
    ).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if h >> 63 else -1.0)


class HashingEncoder:
    """Signed feature hashing of word unigrams and character 3-grams."""

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim <= 0:
            raise ValueError("encoder dim must be positive")
        self.dim = dim
        self.seed = seed

    def features(self, text: str) -> list[str]:
        words = _WORD.findall(text.lower())
        feats = [f"w:{w}" for w in words]
        for w in words:
            padded = f"#{w}#"
            feats.extend(f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2))
        return feats

    def encode(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for feat in self.features(text):
            idx, sign = _bucket(feat, self.dim, self.seed)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class GlossaryEncoder:
    """Expands controlled-vocabulary tokens before delegating to ``base``.

    Used on the triple side so that an abbreviation such as ``URLLC`` also
    carries the words of its long form.
    """

    def __init__(self, base: Encoder, glossary: Mapping[str, str]):
        self.base = base
        self.dim = base.dim
        self._glossary = {k.lower(): v for k, v in glossary.items()}
        self._pattern = (
            re.compile(
                r"(?<![\w-])("
                + "|".join(re.escape(k) for k in sorted(self._glossary, key=len, reverse=True))
                + r")(?![\w-])",
                re.IGNORECASE,
            )
            if self._glossary
            else None
        )

    def expand(self, text: str) -> str:
        if self._pattern is None:
            return text
        extra = []
        for m in self._pattern.finditer(text):
            extra.append(self._glossary[m.group(1).lower()])
        return " ".join([text, *extra]) if extra else text

    def encode(self, text: str) -> np.ndarray:
        return self.base.encode(self.expand(text))


class HTTPEncoder:
    """Remote embedding client: POST {"input": text} -> {"embedding": [...]}."""

    def __init__(self, url: str, dim: int, timeout: float = 10.0):
        if dim <= 0:
            raise ValueError("encoder dim must be positive")
        self.url = url
        self.dim = dim
        self.timeout = timeout

    def encode(self, text: str) -> np.ndarray:
        req = urllib.request.Request(
            self.url,
            data=json.dumps({"input": text}).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        vec = np.asarray(body["embedding"], dtype=float)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"remote embedding has shape {vec.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(vec)):
            raise ValueError("remote embedding is not finite")
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


@dataclass(frozen=True)
class DualEncoder:
    query: Encoder
    triple: Encoder

    def __post_init__(self) -> None:
        if self.query.dim != self.triple.dim:
            raise DimensionMismatch("query and triple encoders must share dim")

    @property
    def dim(self) -> int:
        return self.query.dim


def default_encoder(glossary: Mapping[str, str] | None = None, dim: int = 256, seed: int = 0) -> DualEncoder:
    base = HashingEncoder(dim=dim, seed=seed)
    triple_side: Encoder = GlossaryEncoder(base, glossary) if glossary else base
    return DualEncoder(query=base, triple=triple_side)


# -- query classification ------------------------------------------------------

_QUERY_SIGNALS: dict[str, tuple[str, ...]] = {
    "latency_threshold": (r"\blatenc", r"\bdelay", r"\bms\b", r"millisecond", r"latency_bound"),
    "slicing_constraint": (
        r"\bsst\b",
        r"slice type",
        r"slice/service type",
        r"service type",
        r"\burllc\b",
        r"\bembb\b",
        r"\bmiot\b",
        r"\bv2x\b",
        r"\bhmtc\b",
        r"s-nssai",
        r"provision",
        r"\bconfigure",
        r"\bpolicy",
    ),
    "qos_attribute": (
        r"\b5qi\b",
        r"\bqos\b",
        r"throughput",
        r"\bpriority",
        r"packet loss",
        r"\bmbps\b",
        r"bandwidth",
        r"bit ?rate",
    ),
    "structural": (r"\bprofile", r"identified", r"\bconsist", r"\bbelong", r"\bdocument"),
    "operational": (
        r"spectrum",
        r"\btilt",
        r"\bupf\b",
        r"\bscal",
        r"\bcpu\b",
        r"\bchange",
        r"outage",
        r"\bcaus",
        r"\bfix",
        r"\bissue",
        r"incident",
        r"gnodeb",
        r"\bserv(?:e|es|ing)\b",
        r"\bconnect",
    ),
}
_COMPILED = {c: tuple(re.compile(p) for p in pats) for c, pats in _QUERY_SIGNALS.items()}
# tie-break when two classes collect the same number of signals
_CLASS_PRIORITY = ("latency_threshold", "slicing_constraint", "qos_attribute", "operational", "structural")
assert set(_CLASS_PRIORITY) == set(SEMANTIC_CLASSES)


def classify_query(q: str) -> str:
    if not q or not q.strip():
        raise ValueError("query must be non-empty")
    text = q.lower()
    best, best_hits = "operational", 0
    for cls in _CLASS_PRIORITY:
        hits = sum(1 for p in _COMPILED[cls] if p.search(text))
        if hits > best_hits:
            best, best_hits = cls, hits
    return best


# -- index --------------------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    vector: np.ndarray = field(repr=False)
    semantic_class: str
    predicted: bool
    entities: tuple[str, ...]
    revision: int

    def same_content(self, other: IndexEntry) -> bool:
        return (
            self.semantic_class == other.semantic_class
            and self.predicted == other.predicted
            and self.entities == other.entities
            and np.array_equal(self.vector, other.vector)
        )


def retrieval_text(t: Triple, templates: TemplateSet, ontology: Ontology | None = None) -> str:
    """Verbalization plus the descriptions of the entity types it mentions.

    The descriptions give short sentences shared vocabulary with questions
    that name a kind of thing ("slice type", "base station") instead of an id.
    """
    text = verbalize(t, templates)
    if ontology is None:
        return text
    descs = []
    for ent in (t.subject, t.object):
        name = ontology.type_of(ent)
        et = ontology.entity_type(name) if name else None
        if et is not None and et.description and et.description not in descs:
            descs.append(et.description)
    return " ".join([text, *descs])


def encode_triple(
    t: Triple, encoder: Encoder, templates: TemplateSet, ontology: Ontology | None = None
) -> np.ndarray:
    return encoder.encode(retrieval_text(t, templates, ontology))


class TripleIndex:
    """Immutable index generation over the live triples of one KG revision."""

    def __init__(
        self,
        encoder: DualEncoder,
        templates: TemplateSet,
        entries: Mapping[str, IndexEntry],
        revision: int,
    ):
        self.encoder = encoder
        self.templates = templates
        self.revision = revision
        self.dim = encoder.dim
        self.entries: Mapping[str, IndexEntry] = dict(sorted(entries.items()))
        self.ids = list(self.entries)
        n = len(self.ids)
        self.matrix = np.zeros((n, self.dim))
        for i, e in enumerate(self.entries.values()):
            if e.vector.shape != (self.dim,):
                raise DimensionMismatch(f"entry vector has shape {e.vector.shape}")
            self.matrix[i] = e.vector
        self.classes = np.array([e.semantic_class for e in self.entries.values()], dtype=object)
        self.predicted = np.array([e.predicted for e in self.entries.values()], dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    def same_entries(self, other: TripleIndex) -> bool:
        if self.ids != other.ids:
            return False
        return all(self.entries[i].same_content(other.entries[i]) for i in self.ids)


def _entry(kg: KGView, t: Triple, encoder: DualEncoder, templates: TemplateSet, vector=None) -> IndexEntry:
    vec = encode_triple(t, encoder.triple, templates, kg.ontology) if vector is None else vector
    vec.setflags(write=False)
    return IndexEntry(
        vector=vec,
        semantic_class=kg.semantic_class(t.id),
        predicted=t.predicted,
        entities=kg.entities_of(t),
        revision=kg.revision,
    )


def build_index(kg: KGView, encoder: DualEncoder, templates: TemplateSet) -> TripleIndex:
    entries = {t.id: _entry(kg, t, encoder, templates) for t in kg.live_triples()}
    return TripleIndex(encoder, templates, entries, kg.revision)


def reindex(index: TripleIndex, kg: KGView, encoder: DualEncoder | None = None) -> TripleIndex:
    """Bring ``index`` up to the snapshot ``kg``, encoding only new triples."""
    encoder = encoder or index.encoder
    if encoder.dim != index.dim:
        raise DimensionMismatch(f"encoder dim {encoder.dim} != index dim {index.dim}")
    if kg.revision < index.revision:
        raise ValueError(f"snapshot revision {kg.revision} is older than index revision {index.revision}")
    if kg.revision == index.revision and encoder is index.encoder and kg.live_ids() == index.ids:
        return index
    entries: dict[str, IndexEntry] = {}
    for tid in kg.live_ids():
        t = kg.get(tid)
        assert t is not None
        old = index.entries.get(tid)
        if old is None:
            entries[tid] = _entry(kg, t, encoder, index.templates)
        elif old.predicted != t.predicted:
            entries[tid] = _entry(kg, t, encoder, index.templates, vector=old.vector)
        else:
            entries[tid] = old
    return TripleIndex(encoder, index.templates, entries, kg.revision)


# -- ranking ------------------------------------------------------------------


class Weights(NamedTuple):
    sim: float = 0.7
    ont: float = 0.2
    ctx: float = 0.1

    def validate(self) -> Weights:
        if any(w < 0 for w in self):
            raise ValueError("weights must be non-negative")
        if abs(sum(self) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self)}")
        return self

    @classmethod
    def parse(cls, text: str) -> Weights:
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError("weights take three comma-separated values")
        return cls(*parts).validate()


DEFAULT_WEIGHTS = Weights()


@dataclass(frozen=True)
class QueryContext:
    recent_entities: tuple[str, ...] = ()
    max_size: int = 32

    def __post_init__(self) -> None:
        if len(self.recent_entities) > self.max_size:
            object.__setattr__(self, "recent_entities", self.recent_entities[: self.max_size])

    def observe(self, entities: Iterable[str]) -> QueryContext:
        """New context with ``entities`` moved to the front (most recent first)."""
        fresh = list(dict.fromkeys(entities))
        rest = [e for e in self.recent_entities if e not in fresh]
        return QueryContext(tuple(fresh + rest)[: self.max_size], self.max_size)


@dataclass(frozen=True)
class RankedEvidence:
    triple_id: str
    total: float
    sim: float
    ont_match: int
    ctx: float
    rank: int

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "triple_id": self.triple_id,
            "total": self.total,
            "sim": self.sim,
            "ont_match": self.ont_match,
            "ctx": self.ctx,
        }


def context_overlap(entities: Sequence[str], recent: set[str]) -> float:
    return len(set(entities) & recent) / max(1, len(set(entities)))


def retrieve(
    index: TripleIndex,
    q: str,
    ctx: QueryContext | None = None,
    k: int = 8,
    weights: Weights = DEFAULT_WEIGHTS,
    *,
    hard_filter: bool = False,
    extracted_first: bool = False,
) -> list[RankedEvidence]:
    if k < 1:
        raise ValueError("k must be >= 1")
    weights = Weights(*weights).validate()
    qclass = classify_query(q)
    if len(index) == 0:
        return []
    ctx = ctx or QueryContext()
    recent = set(ctx.recent_entities)

    qv = index.encoder.query.encode(q)
    sims = np.round(index.matrix @ qv, SCORE_DECIMALS)
    ont = (index.classes == qclass).astype(int)
    ctxs = np.array([context_overlap(e.entities, recent) for e in index.entries.values()])
    totals = np.round(weights.sim * sims + weights.ont * ont + weights.ctx * ctxs, SCORE_DECIMALS)

    positions = np.arange(len(index))
    if hard_filter:
        positions = positions[ont == 1]
    if extracted_first:
        keys = (positions, -totals[positions], index.predicted[positions])
    else:
        keys = (positions, index.predicted[positions], -totals[positions])
    order = positions[np.lexsort(keys)][:k]
    return [
        RankedEvidence(
            triple_id=index.ids[i],
            total=float(totals[i]),
            sim=float(sims[i]),
            ont_match=int(ont[i]),
            ctx=float(ctxs[i]),
            rank=r,
        )
        for r, i in enumerate(order, 1)
    ]
