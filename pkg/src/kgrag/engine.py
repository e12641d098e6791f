"""Query engine: binds a store, its retrieval index, templates and a generation backend."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Sequence

from .errors import StageError
from .genclient import Answer, GenerationBackend, generate
from .ingest import AliasTable
from .kg_store import KnowledgeGraph, Provenance, Snapshot, Triple
from .retrieval import (
    DEFAULT_WEIGHTS,
    DualEncoder,
    QueryContext,
    RankedEvidence,
    TripleIndex,
    Weights,
    build_index,
    default_encoder,
    reindex,
    retrieve,
)
from .verbalizer import Prompt, TemplateSet, build_prompt, cite_map

# enough evidence lines to cover a slice with its cells and user-plane nodes
DEFAULT_K = 12


@dataclass(frozen=True)
class AnswerBundle:
    """Everything needed to trace an answer back to its evidence."""

    question: str
    answer: Answer
    evidence: tuple[RankedEvidence, ...]
    prompt: Prompt
    cite_map: dict[str, tuple[str, Provenance]]
    revision: int
    triples: dict[str, Triple] = field(repr=False)

    def citations(self) -> list[dict[str, Any]]:
        out = []
        for tag in self.prompt.tags:
            tid, prov = self.cite_map[tag]
            t = self.triples[tid]
            out.append(
                {
                    "tag": tag,
                    "triple_id": tid,
                    "subject": t.subject,
                    "relation": t.relation,
                    "object": t.object,
                    "doc_uri": prov.doc_uri,
                    "paragraph": prov.paragraph,
                    "predicted": t.predicted,
                }
            )
        return out

    def to_dict(self, with_latency: bool = False) -> dict[str, Any]:
        return {
            "question": self.question,
            "answer": self.answer.to_dict(with_latency=with_latency),
            "citations": self.citations(),
            "evidence": [e.to_dict() for e in self.evidence],
            "prompt": self.prompt.rendered,
            "revision": self.revision,
        }

    def canonical(self) -> str:
        """Byte-stable serialization; wall-clock latency is left out."""
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


class Engine:
    """Answers queries against the latest consistent (snapshot, index) pair.

    The pair is swapped under a lock after each refresh, so a query sees one
    revision from retrieval to citation.
    """

    def __init__(
        self,
        kg: KnowledgeGraph,
        templates: TemplateSet,
        aliases: AliasTable,
        backend: GenerationBackend,
        *,
        encoder: DualEncoder | None = None,
        weights: Weights = DEFAULT_WEIGHTS,
        k: int = DEFAULT_K,
        extracted_first: bool = False,
        hard_filter: bool = False,
        expand_hops: int = 1,
    ):
        self.kg = kg
        self.templates = templates
        self.aliases = aliases
        self.backend = backend
        self.encoder = encoder or default_encoder(aliases.glossary())
        self.weights = Weights(*weights).validate()
        self.k = k
        self.extracted_first = extracted_first
        self.hard_filter = hard_filter
        if expand_hops < 0:
            raise ValueError("expand_hops must be >= 0")
        self.expand_hops = expand_hops
        self._lock = threading.Lock()
        snap = kg.snapshot()
        self._state: tuple[Snapshot, TripleIndex] = (snap, build_index(snap, self.encoder, templates))

    @property
    def revision(self) -> int:
        return self._state[0].revision

    def state(self) -> tuple[Snapshot, TripleIndex]:
        return self._state

    def refresh(self) -> tuple[Snapshot, TripleIndex]:
        """Bring the index up to the store's current revision, incrementally."""
        with self._lock:
            snap, index = self._state
            current = self.kg.snapshot()
            if current.revision != snap.revision:
                self._state = (current, reindex(index, current, self.encoder))
            return self._state

    def mentions(self, text: str, snap: Snapshot | None = None) -> set[str]:
        snap = snap or self._state[0]
        return self.aliases.with_entities(snap.entities()).find_mentions(text)

    def focus(self, q: str, snap: Snapshot) -> list[str]:
        """Entities the question names, then their neighbors up to ``expand_hops``."""
        named = sorted(self.mentions(q, snap))
        around: list[str] = []
        if self.expand_hops:
            for ent in named:
                for t in snap.neighborhood(ent, self.expand_hops):
                    around.extend(snap.entities_of(t))
        return list(dict.fromkeys(named + sorted(set(around) - set(named))))

    def answer(self, q: str, ctx: QueryContext | None = None, k: int | None = None) -> AnswerBundle:
        return answer_query(self, q, ctx, k)


def answer_query(
    engine: Engine, q: str, ctx: QueryContext | None = None, k: int | None = None
) -> AnswerBundle:
    """retrieve -> build_prompt -> generate, each failure labelled with its stage.

    The entities the question itself names (and their neighborhood) are put
    at the front of the context before ranking.
    """
    snap, index = engine.state()
    try:
        focus = engine.focus(q, snap)
        if focus:
            ctx = (ctx or QueryContext()).observe(focus)
        ranked = retrieve(
            index, q, ctx, k or engine.k, engine.weights,
            hard_filter=engine.hard_filter, extracted_first=engine.extracted_first,
        )
    except Exception as exc:
        raise StageError("retrieve", exc) from exc
    triples = {r.triple_id: snap.get(r.triple_id) for r in ranked}
    try:
        prompt = build_prompt([triples[r.triple_id] for r in ranked], q, engine.templates)
    except Exception as exc:
        raise StageError("verbalize", exc) from exc
    try:
        answer = generate(engine.backend, prompt, engine.templates)
    except Exception as exc:
        raise StageError("generate", exc) from exc
    return AnswerBundle(
        question=q,
        answer=answer,
        evidence=tuple(ranked),
        prompt=prompt,
        cite_map=dict(cite_map(prompt)),
        revision=snap.revision,
        triples=triples,
    )


def context_for(engine: Engine, turns: Sequence[str], max_size: int = 32) -> QueryContext:
    """Query context built from the entity mentions of earlier turns, oldest first."""
    ctx = QueryContext(max_size=max_size)
    for turn in turns:
        ctx = ctx.observe(sorted(engine.mentions(turn)))
    return ctx
