"""Translational link prediction (TransE) and the gated admission of predicted edges.

Entity vectors live on the unit sphere after every epoch; a triple scores
exp(-||v_s + v_r - v_o||), so scores fall in (0, 1].
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import KGRAGError
from .kg_store import InsertOutcome, KGView, KnowledgeGraph, Provenance, Triple, triple_id
from .ontology import LITERAL_DOMAINS, Ontology

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.5
DEFAULT_MAX_CANDIDATES = 1000
MODEL_URI_PREFIX = "model://transe/"


class EmptyGraphError(KGRAGError, ValueError):
    pass


class TrainingDiverged(KGRAGError, FloatingPointError):
    pass


class UnknownIdError(KGRAGError, KeyError):
    def __str__(self) -> str:
        return f"id {self.args[0]!r} is not embedded in the model"


@dataclass
class KGEmbeddingModel:
    entities: list[str]
    relations: list[str]
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    margin: float = 1.0
    seed: int = 0
    run_id: str = "untrained"
    trained_at: str = "1970-01-01T00:00:00Z"
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._ent = {e: i for i, e in enumerate(self.entities)}
        self._rel = {r: i for i, r in enumerate(self.relations)}
        if self.entity_vectors.shape != (len(self.entities), self.dim):
            raise ValueError("entity vector matrix does not match the entity list")
        if self.relation_vectors.shape != (len(self.relations), self.dim):
            raise ValueError("relation vector matrix does not match the relation list")

    @property
    def dim(self) -> int:
        return int(self.relation_vectors.shape[1]) if self.relation_vectors.ndim == 2 else 0

    def entity_index(self, e: str) -> int:
        try:
            return self._ent[e]
        except KeyError:
            raise UnknownIdError(e) from None

    def relation_index(self, r: str) -> int:
        try:
            return self._rel[r]
        except KeyError:
            raise UnknownIdError(r) from None

    def has_entity(self, e: str) -> bool:
        return e in self._ent

    def has_relation(self, r: str) -> bool:
        return r in self._rel

    def distance(self, subject: str, relation: str, obj: str) -> float:
        s = self.entity_vectors[self.entity_index(subject)]
        r = self.relation_vectors[self.relation_index(relation)]
        o = self.entity_vectors[self.entity_index(obj)]
        return float(np.linalg.norm(s + r - o))

    def tail_distances(self, subject: str, relation: str) -> np.ndarray:
        """Distance from ``subject + relation`` to every entity, in entity order."""
        s = self.entity_vectors[self.entity_index(subject)]
        r = self.relation_vectors[self.relation_index(relation)]
        return np.linalg.norm(s + r - self.entity_vectors, axis=1)

    @property
    def provenance(self) -> Provenance:
        return Provenance(
            doc_uri=MODEL_URI_PREFIX + self.run_id,
            paragraph=0,
            source_family="synthetic",
            revision_date=self.trained_at,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "margin": self.margin,
            "run_id": self.run_id,
            "trained_at": self.trained_at,
            "loss_trace": self.loss_trace,
            "entities": {e: self.entity_vectors[i].tolist() for i, e in enumerate(self.entities)},
            "relations": {r: self.relation_vectors[i].tolist() for i, r in enumerate(self.relations)},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> KGEmbeddingModel:
        dim = int(d["dim"])
        ents = list(d["entities"])
        rels = list(d["relations"])
        E = np.array([d["entities"][e] for e in ents], dtype=float).reshape(len(ents), dim)
        R = np.array([d["relations"][r] for r in rels], dtype=float).reshape(len(rels), dim)
        return cls(ents, rels, E, R, margin=float(d.get("margin", 1.0)), seed=int(d.get("seed", 0)),
                   run_id=d.get("run_id", "untrained"), trained_at=d.get("trained_at", "1970-01-01T00:00:00Z"),
                   loss_trace=list(d.get("loss_trace", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> KGEmbeddingModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def score(model: KGEmbeddingModel, subject: str, relation: str, obj: str) -> float:
    return math.exp(-model.distance(subject, relation, obj))


def margin_loss_and_grad(
    h: np.ndarray, r: np.ndarray, t: np.ndarray, h_neg: np.ndarray, t_neg: np.ndarray, margin: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Hinge loss max(0, margin + d(h,r,t) - d(h',r,t')) and its gradients.

    Gradients are keyed ``h``, ``r``, ``t``, ``h_neg``, ``t_neg``; the five
    inputs are treated as independent variables.
    """
    pos = h + r - t
    neg = h_neg + r - t_neg
    d_pos = float(np.linalg.norm(pos))
    d_neg = float(np.linalg.norm(neg))
    loss = margin + d_pos - d_neg
    zero = np.zeros_like(h)
    if loss <= 0.0:
        return 0.0, {"h": zero, "r": zero.copy(), "t": zero.copy(), "h_neg": zero.copy(), "t_neg": zero.copy()}
    g_pos = pos / d_pos if d_pos > 0 else zero
    g_neg = neg / d_neg if d_neg > 0 else zero
    return loss, {"h": g_pos, "r": g_pos - g_neg, "t": -g_pos, "h_neg": -g_neg, "t_neg": g_neg}


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def _run_id(triples: Sequence[Triple], params: dict[str, Any]) -> str:
    h = hashlib.blake2b(digest_size=6)
    h.update(json.dumps(params, sort_keys=True).encode())
    for t in triples:
        h.update(t.id.encode())
    return h.hexdigest()


def train(
    kg: KGView,
    dim: int = 64,
    epochs: int = 200,
    learning_rate: float = 0.01,
    margin: float = 1.0,
    seed: int = 0,
    batch_size: int = 32,
) -> KGEmbeddingModel:
    """Fit TransE on the live extracted triples of ``kg`` by minibatch SGD.

    Each positive gets one negative per epoch, its head or tail replaced by a
    uniformly drawn different entity.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if margin <= 0:
        raise ValueError("margin must be positive")
    triples = sorted((t for t in kg.live_triples() if not t.predicted), key=lambda t: t.id)
    if not triples:
        raise EmptyGraphError("link prediction needs at least one extracted triple")

    entities = sorted({x for t in triples for x in (t.subject, t.object)})
    relations = sorted({t.relation for t in triples})
    ent = {e: i for i, e in enumerate(entities)}
    rel = {r: i for i, r in enumerate(relations)}
    heads = np.array([ent[t.subject] for t in triples])
    rels = np.array([rel[t.relation] for t in triples])
    tails = np.array([ent[t.object] for t in triples])
    n_ent = len(entities)

    rng = np.random.default_rng(seed)
    bound = 6.0 / math.sqrt(dim)
    E = _unit_rows(rng.uniform(-bound, bound, size=(n_ent, dim)))
    R = _unit_rows(rng.uniform(-bound, bound, size=(len(relations), dim)))

    trace: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(triples))
        corrupt_head = rng.random(len(triples)) < 0.5
        # shift by 1..n-1 so the replacement always differs from the original
        shift = rng.integers(1, n_ent, size=len(triples)) if n_ent > 1 else np.zeros(len(triples), int)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            h, r, t = heads[idx], rels[idx], tails[idx]
            h_neg = np.where(corrupt_head[idx], (h + shift[idx]) % n_ent, h)
            t_neg = np.where(corrupt_head[idx], t, (t + shift[idx]) % n_ent)
            pos = E[h] + R[r] - E[t]
            neg = E[h_neg] + R[r] - E[t_neg]
            d_pos = np.linalg.norm(pos, axis=1)
            d_neg = np.linalg.norm(neg, axis=1)
            losses = margin + d_pos - d_neg
            active = losses > 0
            epoch_loss += float(losses[active].sum())
            if not active.any():
                continue
            g_pos = pos[active] / np.maximum(d_pos[active], 1e-12)[:, None]
            g_neg = neg[active] / np.maximum(d_neg[active], 1e-12)[:, None]
            gE = np.zeros_like(E)
            gR = np.zeros_like(R)
            np.add.at(gE, h[active], g_pos)
            np.add.at(gE, t[active], -g_pos)
            np.add.at(gE, h_neg[active], -g_neg)
            np.add.at(gE, t_neg[active], g_neg)
            np.add.at(gR, r[active], g_pos - g_neg)
            E -= learning_rate * gE
            R -= learning_rate * gR
        mean_loss = epoch_loss / len(triples)
        if not math.isfinite(mean_loss) or not np.isfinite(E).all() or not np.isfinite(R).all():
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch} (lr={learning_rate}, dim={dim}, margin={margin})"
            )
        trace.append(mean_loss)
        E = _unit_rows(E)

    params = {"dim": dim, "epochs": epochs, "lr": learning_rate, "margin": margin, "seed": seed,
              "batch_size": batch_size}
    log.info("trained TransE on %d triples, final loss %.4f", len(triples), trace[-1])
    return KGEmbeddingModel(
        entities, relations, E, R, margin=margin, seed=seed,
        run_id=_run_id(triples, params),
        trained_at=max(t.valid_from for t in triples),
        loss_trace=trace,
    )


@dataclass(frozen=True)
class CandidateEdge:
    subject: str
    relation: str
    object: str
    pred_score: float
    provenance: Provenance | None

    @property
    def id(self) -> str:
        return triple_id(self.subject, self.relation, self.object)

    def to_triple(self) -> Triple:
        if self.provenance is None:
            raise ValueError("candidate carries no provenance")
        return Triple(
            self.subject, self.relation, self.object,
            provenance=self.provenance,
            valid_from=self.provenance.revision_date,
            predicted=True,
            score=self.pred_score,
        )

    def to_dict(self) -> dict[str, Any]:
        p = self.provenance
        return {
            "subject": self.subject, "relation": self.relation, "object": self.object,
            "pred_score": self.pred_score,
            "doc_uri": p.doc_uri if p else None,
            "paragraph": p.paragraph if p else None,
            "source_family": p.source_family if p else None,
            "revision_date": p.revision_date if p else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CandidateEdge:
        prov = None
        if d.get("doc_uri"):
            prov = Provenance(d["doc_uri"], int(d.get("paragraph") or 0), d["source_family"], d["revision_date"])
        return cls(d["subject"], d["relation"], d["object"], float(d["pred_score"]), prov)


def _admissible_tails(ontology: Ontology, tail: str, entities: Sequence[str]) -> np.ndarray:
    if tail in LITERAL_DOMAINS:
        rx = LITERAL_DOMAINS[tail][0]
        mask = [ontology.type_of(e) is None and rx.fullmatch(e) is not None for e in entities]
    else:
        mask = [ontology.type_of(e) == tail for e in entities]
    return np.flatnonzero(mask)


def propose(
    model: KGEmbeddingModel,
    kg: KGView,
    tau: float = DEFAULT_TAU,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
) -> list[CandidateEdge]:
    """Score every type-compatible edge missing from the live KG and keep those above ``tau``.

    Output is ordered by score descending, then triple id ascending.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    ontology = kg.ontology
    live = {t.key for t in kg.live_triples()}
    types = {e: ontology.type_of(e) for e in model.entities}
    prov = model.provenance
    max_dist = -math.log(tau)
    found: list[CandidateEdge] = []
    for sig in ontology.signatures:
        if not model.has_relation(sig.relation):
            continue
        head_idx = [i for i, e in enumerate(model.entities) if types[e] == sig.head]
        tail_idx = _admissible_tails(ontology, sig.tail, model.entities)
        if not head_idx or not len(tail_idx):
            continue
        r = model.relation_vectors[model.relation_index(sig.relation)]
        T = model.entity_vectors[tail_idx]
        for hi in head_idx:
            d = np.linalg.norm(model.entity_vectors[hi] + r - T, axis=1)
            for j in np.flatnonzero(d < max_dist):
                s, o = model.entities[hi], model.entities[tail_idx[j]]
                if s == o or (s, sig.relation, o) in live:
                    continue
                p = math.exp(-float(d[j]))
                if p > tau and ontology.permits_triple(s, sig.relation, o):
                    found.append(CandidateEdge(s, sig.relation, o, p, prov))
    found.sort(key=lambda c: (-c.pred_score, c.id))
    return found[:max_candidates]


def gate_failures(
    c: CandidateEdge, ontology: Ontology, tau: float, model: KGEmbeddingModel | None = None
) -> list[str]:
    """Names of the acceptance conditions ``c`` fails (empty when admissible)."""
    failed = []
    if not ontology.permits_triple(c.subject, c.relation, c.object):
        failed.append("permit")
    ok_score = 0.0 < c.pred_score <= 1.0 and c.pred_score > tau
    if ok_score and model is not None:
        try:
            ok_score = math.isclose(score(model, c.subject, c.relation, c.object), c.pred_score,
                                    rel_tol=1e-9, abs_tol=1e-12)
        except UnknownIdError:
            ok_score = False
    if not ok_score:
        failed.append("score")
    p = c.provenance
    if p is None or p.source_family != "synthetic" or not p.doc_uri.startswith(MODEL_URI_PREFIX):
        failed.append("provenance")
    return failed


@dataclass
class AdmissionReport:
    inserted: int = 0
    gate_rejected: int = 0
    outcomes: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "inserted": self.inserted,
            "gate_rejected": self.gate_rejected,
            "outcomes": {k.value: v for k, v in sorted(self.outcomes.items())},
        }


def admit(
    kg: KnowledgeGraph,
    candidates: Iterable[CandidateEdge],
    tau: float = DEFAULT_TAU,
    model: KGEmbeddingModel | None = None,
) -> AdmissionReport:
    """Insert gate-passing candidates as predicted triples; the store arbitrates conflicts."""
    report = AdmissionReport()
    with kg.batch():
        for c in candidates:
            if gate_failures(c, kg.ontology, tau, model):
                report.gate_rejected += 1
                continue
            outcome = kg.insert(c.to_triple())
            report.outcomes[outcome] += 1
            if outcome in (InsertOutcome.INSERTED, InsertOutcome.SUPERSEDED_PRIOR):
                report.inserted += 1
    return report
