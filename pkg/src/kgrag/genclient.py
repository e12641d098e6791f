"""Generation backends: a deterministic rule-driven mock and a chat-completion HTTP client."""
from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from .errors import KGRAGError
from .verbalizer import Prompt, TemplateSet, explanation_for

log = logging.getLogger(__name__)

ABSTAIN = "Insufficient KG evidence."
TAG_RE = re.compile(r"\[(T\d+)\]")
BACKOFF_S = (0.5, 1.0, 2.0)
TOTAL_TIMEOUT_S = 30.0
API_KEY_ENV = "KGRAG_API_KEY"


class CitationIntegrityError(KGRAGError):
    """Raised instead of returning an answer whose citations do not resolve."""

    def __init__(self, bad_tags: Sequence[str], quarantined: Draft):
        super().__init__(f"answer cites tags absent from the prompt: {', '.join(bad_tags)}")
        self.bad_tags = list(bad_tags)
        self.quarantined = quarantined


class BackendTransportError(KGRAGError, RuntimeError):
    pass


@dataclass(frozen=True)
class Draft:
    """What a backend produces before citation checks and timing."""

    text: str
    cited_tags: tuple[str, ...] = ()
    explanation: str | None = None
    claims: tuple[tuple[str, str, str], ...] = ()


@dataclass(frozen=True)
class Answer:
    text: str
    cited_tags: tuple[str, ...]
    explanation: str | None
    latency_ms: float
    backend_id: str
    claims: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")

    def to_dict(self, with_latency: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {
            "text": self.text,
            "cited_tags": list(self.cited_tags),
            "explanation": self.explanation,
            "backend_id": self.backend_id,
            "claims": [list(c) for c in self.claims],
        }
        if with_latency:
            d["latency_ms"] = self.latency_ms
        return d


class GenerationBackend(Protocol):
    backend_id: str

    def draft(self, prompt: Prompt) -> Draft: ...


# -- mock -----------------------------------------------------------------------


@dataclass(frozen=True)
class MockRule:
    """Answer rule: fires when the question and one evidence sentence both match.

    Named groups captured from ``question`` may be referenced as ``{name}`` in
    ``evidence``; they are substituted regex-escaped.  ``answer`` and ``claims``
    are formatted with the groups of both matches.  The matched line is cited,
    plus every line matching one of ``also_cite``; ``tags`` adds literal tags.
    """

    name: str
    answer: str
    evidence: str | None = None
    question: str | None = None
    also_cite: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    claims: tuple[tuple[str, str, str], ...] | None = None

    def fire(self, prompt: Prompt) -> Draft | None:
        groups: dict[str, str] = {}
        if self.question is not None:
            qm = re.search(self.question, prompt.question)
            if qm is None:
                return None
            groups.update({k: v for k, v in qm.groupdict().items() if v is not None})
        cited: list[str] = []
        cited_lines = []
        if self.evidence is not None:
            pattern = self.evidence
            for key, value in groups.items():
                pattern = pattern.replace("{" + key + "}", re.escape(value))
            rx = re.compile(pattern)
            for line in prompt.evidence:
                em = rx.search(line.sentence)
                if em:
                    groups.update({k: v for k, v in em.groupdict().items() if v is not None})
                    cited.append(line.tag)
                    cited_lines.append(line)
                    break
            else:
                return None
        for extra in self.also_cite:
            rx = re.compile(extra)
            for line in prompt.evidence:
                if line.tag not in cited and rx.search(line.sentence):
                    cited.append(line.tag)
                    cited_lines.append(line)
        cited.extend(t for t in self.tags if t not in cited)
        if self.claims is None:
            claims = tuple(line.triple.key for line in cited_lines)
        else:
            claims = tuple(tuple(part.format(**groups) for part in c) for c in self.claims)
        return Draft(self.answer.format(**groups), tuple(cited), None, claims)


class MockBackend:
    """Ordered answer rules over the prompt; the first rule that fires wins."""

    backend_id = "mock"

    def __init__(self, rules: Sequence[MockRule], abstain: str = ABSTAIN):
        self.rules = list(rules)
        self.abstain = abstain

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> MockBackend:
        if path is None:
            text = resources.files("kgrag.data").joinpath("mock_rules.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls(parse_mock_rules(json.loads(text)))

    def draft(self, prompt: Prompt) -> Draft:
        for rule in self.rules:
            out = rule.fire(prompt)
            if out is not None:
                return out
        return Draft(self.abstain)


def parse_mock_rules(items: Sequence[Mapping[str, Any]]) -> list[MockRule]:
    rules = []
    for i, d in enumerate(items):
        if "answer" not in d:
            raise ValueError(f"mock rule {i} has no answer")
        claims = d.get("claims")
        rules.append(
            MockRule(
                name=d.get("name", f"rule{i}"),
                answer=d["answer"],
                evidence=d.get("evidence"),
                question=d.get("question"),
                also_cite=tuple(d.get("also_cite", ())),
                tags=tuple(d.get("tags", ())),
                claims=None if claims is None else tuple(tuple(c) for c in claims),
            )
        )
    return rules


# -- remote ---------------------------------------------------------------------

SYSTEM_MESSAGE = (
    "Answer the question using only the numbered context lines. "
    "Cite every line you rely on with its tag, for example [T1]. "
    "If the context is insufficient, reply exactly: " + ABSTAIN
)


class HTTPBackend:
    """Chat-completion client: POST {model, messages} and read choices[0].message.content."""

    def __init__(
        self,
        url: str,
        model: str,
        *,
        api_key: str | None = None,
        backoff: Sequence[float] = BACKOFF_S,
        total_timeout: float = TOTAL_TIMEOUT_S,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        opener: Callable[..., Any] = urllib.request.urlopen,
    ):
        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.backoff = tuple(backoff)
        self.total_timeout = total_timeout
        self._sleep = sleep
        self._clock = clock
        self._open = opener
        self.backend_id = f"http:{model}"

    def _request(self, prompt: Prompt) -> urllib.request.Request:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt.rendered},
            ],
            "temperature": 0,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return urllib.request.Request(self.url, data=json.dumps(body).encode(), headers=headers)

    def draft(self, prompt: Prompt) -> Draft:
        deadline = self._clock() + self.total_timeout
        req = self._request(prompt)
        last: Exception | None = None
        # one initial call plus one retry per backoff step
        for attempt in range(len(self.backoff) + 1):
            remaining = deadline - self._clock()
            if remaining <= 0:
                break
            try:
                with self._open(req, timeout=remaining) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                text = payload["choices"][0]["message"]["content"].strip()
                return Draft(text, tuple(dict.fromkeys(TAG_RE.findall(text))))
            except urllib.error.HTTPError as exc:
                if exc.code != 429 and exc.code < 500:
                    raise BackendTransportError(f"generation request rejected: HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last = exc
            except (KeyError, IndexError, ValueError) as exc:
                raise BackendTransportError(f"malformed completion response: {exc}") from exc
            if attempt < len(self.backoff):
                wait = self.backoff[attempt]
                if self._clock() + wait >= deadline:
                    break
                log.warning("generation attempt %d failed (%s); retrying in %.1fs", attempt + 1, last, wait)
                self._sleep(wait)
        raise BackendTransportError(f"generation failed after retries: {last}")


# -- generate --------------------------------------------------------------------


def generate(backend: GenerationBackend, prompt: Prompt, templates: TemplateSet | None = None) -> Answer:
    """Run the backend and validate its citations against the prompt's tags.

    With ``templates`` given, an explanation clause is attached when a cited
    triple is a latency threshold and the backend supplied none.
    """
    start = time.perf_counter()
    draft = backend.draft(prompt)
    known = set(prompt.tags)
    bad = [t for t in draft.cited_tags if t not in known]
    if bad:
        log.error("quarantined answer from %s citing %s", backend.backend_id, bad)
        raise CitationIntegrityError(bad, draft)
    explanation = draft.explanation
    if explanation is None and templates is not None and draft.cited_tags:
        by_tag = {e.tag: e.triple for e in prompt.evidence}
        explanation = explanation_for([by_tag[t] for t in draft.cited_tags], templates)
    return Answer(
        text=draft.text,
        cited_tags=draft.cited_tags,
        explanation=explanation,
        latency_ms=(time.perf_counter() - start) * 1000.0,
        backend_id=backend.backend_id,
        claims=draft.claims,
    )
