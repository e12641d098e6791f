"""Claim-level hallucination audit against the KG.

Each claim gets exactly one label.  Rules are tried in a fixed order so that
overlapping cases resolve the same way every time::

    supported -> outdated -> fabricated -> unverifiable

An answer whose claims share no entity with the question is labelled
off_topic wholesale.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .ingest import AliasTable
from .kg_store import KGView, triple_id

LABELS = ("supported", "outdated", "fabricated", "unverifiable", "off_topic")


@dataclass(frozen=True)
class Claim:
    subject: str
    relation: str
    object: str
    asserted_by: str = ""

    def __post_init__(self) -> None:
        for name in ("subject", "relation", "object"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"claim {name} must be a non-empty string")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class AuditVerdict:
    claim: Claim
    label: str
    witness: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"unknown audit label {self.label!r}")
        if self.label in ("supported", "outdated", "fabricated") and not self.witness:
            raise ValueError(f"{self.label} verdict needs a witness")

    def to_dict(self) -> dict[str, Any]:
        return {"claim": list(self.claim.key), "label": self.label, "witness": list(self.witness)}


def audit_claim(kg: KGView, c: Claim) -> AuditVerdict:
    exact = kg.get(triple_id(*c.key))
    if exact is not None and exact.live:
        return AuditVerdict(c, "supported", (exact.id,))

    known = kg.ontology.has_relation(c.relation)
    current = kg.lookup(subject=c.subject, relation=c.relation) if known else []
    differing = [t for t in current if t.object != c.object]
    if exact is not None and differing:
        return AuditVerdict(c, "outdated", (exact.id, *(t.id for t in differing)))
    if known and kg.ontology.is_functional(c.relation) and differing:
        return AuditVerdict(c, "fabricated", tuple(t.id for t in differing))
    return AuditVerdict(c, "unverifiable")


@dataclass(frozen=True)
class AnswerAudit:
    answer_id: str
    query: str
    verdicts: tuple[AuditVerdict, ...]

    @property
    def summary(self) -> dict[str, int]:
        counts = Counter(v.label for v in self.verdicts)
        return {label: counts.get(label, 0) for label in LABELS}

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer_id": self.answer_id,
            "query": self.query,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "summary": self.summary,
        }


def claim_entities(kg: KGView, claims: Iterable[Claim]) -> set[str]:
    out: set[str] = set()
    for c in claims:
        out.add(c.subject)
        sig = kg.ontology.signature_for(*c.key)
        if sig is None or kg.ontology.entity_type(sig.tail) is not None:
            out.add(c.object)
    return out


def audit_answer(
    kg: KGView, query: str, claims: Sequence[Claim], aliases: AliasTable, answer_id: str = ""
) -> AnswerAudit:
    """Audit each claim; everything is off_topic when claims and question share no entity.

    A question naming no known entity at all gives no basis for the topic
    rule, so its claims are audited individually.
    """
    mentions = aliases.with_entities(kg.entities()).find_mentions(query)
    if claims and mentions and not (claim_entities(kg, claims) & mentions):
        verdicts = tuple(AuditVerdict(c, "off_topic") for c in claims)
    else:
        verdicts = tuple(audit_claim(kg, c) for c in claims)
    return AnswerAudit(answer_id, query, verdicts)


# -- batch reports ------------------------------------------------------------------


def parse_answer_record(rec: Mapping[str, Any], lineno: int = 0) -> tuple[str, str, list[Claim]]:
    """Accept either ``{answer_id, query, claims}`` or a serialized answer bundle."""
    answer_id = str(rec.get("answer_id", lineno))
    query = rec.get("query", rec.get("question"))
    raw = rec.get("claims")
    if raw is None and isinstance(rec.get("answer"), Mapping):
        raw = rec["answer"].get("claims", [])
    if not isinstance(query, str) or raw is None:
        raise ValueError(f"answer record {lineno}: needs a query and claims")
    claims = []
    for item in raw:
        if isinstance(item, Mapping):
            claims.append(Claim(item["subject"], item["relation"], item["object"], answer_id))
        else:
            s, r, o = item
            claims.append(Claim(s, r, o, answer_id))
    return answer_id, query, claims


def audit_report(kg: KGView, records: Iterable[Mapping[str, Any]], aliases: AliasTable) -> dict[str, Any]:
    audits = []
    for i, rec in enumerate(records, 1):
        answer_id, query, claims = parse_answer_record(rec, i)
        audits.append(audit_answer(kg, query, claims, aliases, answer_id))
    totals: Counter[str] = Counter()
    for a in audits:
        totals.update(a.summary)
    n = sum(totals.values())
    return {
        "answers": [a.to_dict() for a in audits],
        "totals": {label: totals.get(label, 0) for label in LABELS},
        "rates": {label: (totals.get(label, 0) / n if n else 0.0) for label in LABELS},
        "claims": n,
    }


def read_answers(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc.msg}") from None
    return out
