"""Template verbalization of triples and citation-tagged prompt assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import KGRAGError
from .kg_store import Provenance, Triple
from .ontology import LITERAL_DOMAINS, Ontology

NO_EVIDENCE = "No KG evidence retrieved."


class MissingTemplateError(KGRAGError, KeyError):
    def __str__(self) -> str:
        return f"no template for relation {self.args[0]!r}"


class TemplateError(KGRAGError, ValueError):
    pass


@dataclass(frozen=True)
class Template:
    relation: str
    pattern: str
    literal_format: str | None = None

    def __post_init__(self) -> None:
        for slot in ("{subject}", "{object}"):
            if self.pattern.count(slot) != 1:
                raise TemplateError(f"template for {self.relation!r} must contain {slot} exactly once")


class TemplateSet:
    """One template per relation, bound to the ontology used for rendering."""

    def __init__(self, templates: Iterable[Template], ontology: Ontology):
        self.ontology = ontology
        self._by_rel: dict[str, Template] = {}
        for t in templates:
            if t.relation in self._by_rel:
                raise TemplateError(f"duplicate template for relation {t.relation!r}")
            self._by_rel[t.relation] = t

    def __getitem__(self, relation: str) -> Template:
        try:
            return self._by_rel[relation]
        except KeyError:
            raise MissingTemplateError(relation) from None

    def __contains__(self, relation: object) -> bool:
        return relation in self._by_rel

    def relations(self) -> list[str]:
        return list(self._by_rel)


def load_templates(ontology: Ontology, path: str | Path | None = None) -> TemplateSet:
    if path is None:
        text = resources.files("kgrag.data").joinpath("templates.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    items = json.loads(text)
    if not isinstance(items, list):
        raise TemplateError("template file must be a JSON array")
    return TemplateSet(
        (Template(d["relation"], d["pattern"], d.get("literal_format")) for d in items),
        ontology,
    )


def render_object(t: Triple, templates: TemplateSet) -> str:
    ontology = templates.ontology
    sig = ontology.signature_for(*t.key)
    if sig is not None and sig.tail in LITERAL_DOMAINS:
        fmt = templates[t.relation].literal_format
        if not fmt:
            return t.object
        m = LITERAL_DOMAINS[sig.tail][0].fullmatch(t.object)
        value = m.group(1) if m and m.groups() else t.object
        return fmt.format(value=value, raw=t.object)
    return ontology.display(t.object)


def verbalize(t: Triple, templates: TemplateSet) -> str:
    template = templates[t.relation]
    subject = templates.ontology.display(t.subject)
    obj = render_object(t, templates)
    # sequential replace keeps braces inside entity ids intact
    return template.pattern.replace("{subject}", subject, 1).replace("{object}", obj, 1)


def explanation_for(triples: Iterable[Triple], templates: TemplateSet) -> str | None:
    """Explanatory clause for cited latency-threshold evidence, if any."""
    ontology = templates.ontology
    for t in triples:
        if ontology.classify_relation(t.relation) != "latency_threshold":
            continue
        where = (
            "the slice profile"
            if ontology.type_of(t.subject) == "SliceProfile"
            else ontology.display(t.subject)
        )
        return f"This satisfies the {render_object(t, templates)} latency requirement defined in {where}."
    return None


@dataclass(frozen=True)
class EvidenceLine:
    tag: str
    sentence: str
    triple: Triple


@dataclass(frozen=True)
class Prompt:
    question: str
    evidence: tuple[EvidenceLine, ...]
    rendered: str

    @property
    def evidence_lines(self) -> list[tuple[str, str]]:
        return [(e.tag, e.sentence) for e in self.evidence]

    @property
    def tags(self) -> list[str]:
        return [e.tag for e in self.evidence]


def build_prompt(evidence: Sequence[Triple], question: str, templates: TemplateSet) -> Prompt:
    lines = tuple(
        EvidenceLine(f"T{i}", verbalize(t, templates), t) for i, t in enumerate(evidence, 1)
    )
    body = [f"[{e.tag}] {e.sentence}" for e in lines] or [NO_EVIDENCE]
    rendered = "\n".join(["Context:", *body, f"Question: {question}"]) + "\n"
    return Prompt(question=question, evidence=lines, rendered=rendered)


def cite_map(p: Prompt) -> Mapping[str, tuple[str, Provenance]]:
    return {e.tag: (e.triple.id, e.triple.provenance) for e in p.evidence}
