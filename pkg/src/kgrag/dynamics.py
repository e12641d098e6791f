"""Streaming telecom events into the KG, and the static-vs-dynamic freshness bench.

Bench time is virtual: events carry their own timestamps and probes are
re-asked every ``poll_interval_s`` seconds after their triggering event.
"""
from __future__ import annotations

import heapq
import json
import logging
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import KGRAGError
from .kg_store import (
    EVENT_URI_PREFIX,
    InsertOutcome,
    KGView,
    KnowledgeGraph,
    Provenance,
    Triple,
    format_ts,
    parse_ts,
)
from .retrieval import TripleIndex, build_index, reindex

log = logging.getLogger(__name__)

EVENT_KINDS = ("spectrum_reassign", "tilt_adjust", "upf_scale", "slice_policy_change")
DEFAULT_POLL_S = 1.0
DEFAULT_MAX_POLLS = 3


class EventError(KGRAGError, ValueError):
    pass


class OutOfOrderEvent(EventError):
    pass


class UnknownTargetError(EventError):
    pass


class ProbeError(KGRAGError, ValueError):
    pass


def _fmt_number(x: Any) -> str:
    v = float(x)
    return str(int(v)) if v.is_integer() else repr(v)


# kind -> (target entity type, attribute relation, payload key, object formatter)
DERIVATIONS: dict[str, tuple[str, str, str, Callable[[Any], str]]] = {
    "spectrum_reassign": ("gNodeB", "spectrum_band", "band", str),
    "tilt_adjust": ("gNodeB", "tilt_deg", "tilt_deg", lambda v: _fmt_number(v) + "deg"),
    "upf_scale": ("UPF", "cpu_share", "cpu_share", lambda v: _fmt_number(v) + "%"),
    "slice_policy_change": ("Slice", "policy", "policy", str),
}


@dataclass(frozen=True)
class UpdateEvent:
    event_id: str
    timestamp: str
    kind: str
    target: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.event_id:
            raise EventError("event_id must be non-empty")
        if self.kind not in DERIVATIONS:
            raise EventError(f"unknown event kind {self.kind!r}")
        _, _, key, _ = DERIVATIONS[self.kind]
        if key not in self.payload:
            raise EventError(f"event {self.event_id}: {self.kind} payload needs {key!r}")
        object.__setattr__(self, "timestamp", format_ts(self.timestamp))

    @property
    def at(self) -> datetime:
        return parse_ts(self.timestamp)

    @property
    def provenance(self) -> Provenance:
        return Provenance(EVENT_URI_PREFIX + self.event_id, 0, "log", self.timestamp)

    def derived_triples(self) -> list[Triple]:
        _, relation, key, fmt = DERIVATIONS[self.kind]
        prov = self.provenance
        stamp = self.at.strftime("%H:%M")
        return [
            Triple(self.target, relation, fmt(self.payload[key]), prov, self.timestamp),
            Triple(self.target, "last_change", f"{self.kind}@{stamp}", prov, self.timestamp),
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "timestamp": self.timestamp,
            "kind": self.kind,
            "target": self.target,
            "payload": dict(self.payload),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> UpdateEvent:
        try:
            return cls(d["event_id"], d["timestamp"], d["kind"], d["target"], dict(d.get("payload", {})))
        except KeyError as exc:
            raise EventError(f"event record missing field {exc}") from None


def parse_events(lines: Iterable[str], source: str = "<events>") -> list[UpdateEvent]:
    events = []
    last: datetime | None = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            e = UpdateEvent.from_dict(json.loads(line))
        except (json.JSONDecodeError, EventError, ValueError) as exc:
            raise EventError(f"{source}:{lineno}: {exc}") from None
        if last is not None and e.at < last:
            raise OutOfOrderEvent(f"{source}:{lineno}: timestamp {e.timestamp} goes backwards")
        last = e.at
        events.append(e)
    return events


def load_events(path: str | Path) -> list[UpdateEvent]:
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, str(path))


def write_events(path: str | Path, events: Iterable[UpdateEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


@dataclass
class MutationSummary:
    event_id: str
    added: list[str] = field(default_factory=list)
    superseded: list[str] = field(default_factory=list)
    outcomes: Counter = field(default_factory=Counter)
    created_target: bool = False
    revision: int = 0
    apply_ms: float = 0.0

    @property
    def noop(self) -> bool:
        return not self.added

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "added": self.added,
            "superseded": self.superseded,
            "outcomes": {k.value: v for k, v in sorted(self.outcomes.items())},
            "created_target": self.created_target,
            "revision": self.revision,
            "apply_ms": self.apply_ms,
        }


def _check_target(kg: KGView, e: UpdateEvent) -> bool:
    """True when the target is new; raises when its type cannot be inferred."""
    expected = DERIVATIONS[e.kind][0]
    actual = kg.ontology.type_of(e.target)
    if actual != expected:
        raise UnknownTargetError(
            f"event {e.event_id}: target {e.target!r} is not a {expected} id"
        )
    return not kg.has_entity(e.target)


def apply_event(
    kg: KnowledgeGraph, index: TripleIndex | None, e: UpdateEvent
) -> tuple[MutationSummary, TripleIndex | None]:
    """Insert the event's derived triples, then bring ``index`` up to date.

    Events older than the latest applied one are refused; re-applying an
    event is a no-op because its derived triples are already live.
    """
    start = time.perf_counter()
    last = kg.last_event_at
    if last is not None and e.at < last:
        raise OutOfOrderEvent(f"event {e.event_id} at {e.timestamp} precedes {format_ts(last)}")
    summary = MutationSummary(e.event_id, created_target=_check_target(kg, e))
    with kg.batch():
        for t in e.derived_triples():
            before = [x.id for x in kg.lookup(subject=t.subject, relation=t.relation)]
            outcome = kg.insert(t, strict=True)
            summary.outcomes[outcome] += 1
            if outcome in (InsertOutcome.INSERTED, InsertOutcome.SUPERSEDED_PRIOR):
                summary.added.append(t.id)
            if outcome is InsertOutcome.SUPERSEDED_PRIOR:
                summary.superseded.extend(tid for tid in before if tid != t.id)
        if last is None or e.at > last:
            kg.last_event_at = e.at
    if index is not None:
        index = reindex(index, kg.snapshot())
    summary.revision = kg.revision
    summary.apply_ms = (time.perf_counter() - start) * 1000.0
    return summary, index


def rebuild(base: Iterable[Triple], events: Sequence[UpdateEvent], ontology) -> KnowledgeGraph:
    """From-scratch KG over a base corpus plus every derived triple of ``events``."""
    kg = KnowledgeGraph(ontology)
    with kg.batch():
        for t in base:
            if t.live:
                kg.insert(t)
        for e in events:
            for t in e.derived_triples():
                kg.insert(t)
        if events:
            kg.last_event_at = max(e.at for e in events)
    return kg


# -- probes and bench ------------------------------------------------------------------


@dataclass(frozen=True)
class Probe:
    query: str
    pre_expected: str
    post_expected: str
    event_id: str

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Probe:
        try:
            p = cls(str(d["query"]), str(d["pre_expected"]), str(d["post_expected"]), str(d["event_id"]))
        except KeyError as exc:
            raise ProbeError(f"probe missing field {exc}") from None
        if not p.query.strip():
            raise ProbeError("probe query must be non-empty")
        return p

    def to_dict(self) -> dict[str, str]:
        return {
            "query": self.query,
            "pre_expected": self.pre_expected,
            "post_expected": self.post_expected,
            "event_id": self.event_id,
        }


def load_probes(path: str | Path) -> list[Probe]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(Probe.from_dict(json.loads(line)))
                except (json.JSONDecodeError, ProbeError) as exc:
                    raise ProbeError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass
class ProbeTrace:
    event_id: str
    query: str
    asks: list[tuple[float, str]] = field(default_factory=list)
    verdict: str = "other"
    delay_s: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "query": self.query,
            "asks": [{"t": t, "answer": a} for t, a in self.asks],
            "verdict": self.verdict,
            "delay_s": self.delay_s,
        }


@dataclass
class BenchReport:
    mode: str
    poll_interval_s: float
    post_change_accuracy: float
    staleness_rate: float
    delay_median_s: float | None
    delay_p95_s: float | None
    per_event: list[ProbeTrace]

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "poll_interval_s": self.poll_interval_s,
            "probes": len(self.per_event),
            "post_change_accuracy": self.post_change_accuracy,
            "staleness_rate": self.staleness_rate,
            "delay_median_s": self.delay_median_s,
            "delay_p95_s": self.delay_p95_s,
            "per_event": [p.to_dict() for p in self.per_event],
        }


def percentile(values: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=float), q, method="linear"))


def run_bench(
    engine_factory: Callable[[KnowledgeGraph], Any],
    initial_kg: KnowledgeGraph,
    stream: Sequence[UpdateEvent],
    probes: Sequence[Probe],
    mode: str = "dynamic",
    poll_interval_s: float = DEFAULT_POLL_S,
    max_polls: int = DEFAULT_MAX_POLLS,
) -> BenchReport:
    """Replay ``stream`` on virtual time and score each probe's final answer.

    ``engine_factory`` wraps a KG in an engine exposing ``answer(q)`` and
    ``refresh()``.  The KG is mutated in dynamic mode; pass a copy if the
    caller needs the original.
    """
    if mode not in ("static", "dynamic"):
        raise ValueError("mode must be 'static' or 'dynamic'")
    if poll_interval_s <= 0 or max_polls < 1:
        raise ValueError("poll interval must be positive and max_polls >= 1")
    by_id = {e.event_id: e for e in stream}
    missing = sorted({p.event_id for p in probes} - set(by_id))
    if missing:
        raise ProbeError(f"probes reference events absent from the stream: {missing}")

    engine = engine_factory(initial_kg)
    t0 = stream[0].at if stream else None
    # heap of (virtual seconds, phase, seq, payload); events sort before asks at equal time
    agenda: list[tuple[float, int, int, Any]] = []
    seq = 0
    for e in stream:
        heapq.heappush(agenda, ((e.at - t0).total_seconds(), 0, seq, e))
        seq += 1
    traces = [ProbeTrace(p.event_id, p.query) for p in probes]
    for i, p in enumerate(probes):
        at = (by_id[p.event_id].at - t0).total_seconds() + poll_interval_s
        heapq.heappush(agenda, (at, 1, seq, (i, 1)))
        seq += 1

    while agenda:
        now, phase, _, item = heapq.heappop(agenda)
        if phase == 0:
            if mode == "dynamic":
                apply_event(engine.kg, None, item)
            continue
        i, attempt = item
        probe, trace = probes[i], traces[i]
        engine.refresh()
        text = engine.answer(probe.query).answer.text
        trace.asks.append((now, text))
        if text == probe.post_expected:
            trace.verdict = "correct"
            trace.delay_s = now - (by_id[probe.event_id].at - t0).total_seconds()
            continue
        trace.verdict = "stale" if text == probe.pre_expected else "other"
        if attempt < max_polls:
            heapq.heappush(agenda, (now + poll_interval_s, 1, seq, (i, attempt + 1)))
            seq += 1

    n = len(traces)
    delays = [t.delay_s for t in traces if t.delay_s is not None]
    return BenchReport(
        mode=mode,
        poll_interval_s=poll_interval_s,
        post_change_accuracy=sum(t.verdict == "correct" for t in traces) / n if n else 0.0,
        staleness_rate=sum(t.verdict == "stale" for t in traces) / n if n else 0.0,
        delay_median_s=statistics.median(delays) if delays else None,
        delay_p95_s=percentile(delays, 95) if delays else None,
        per_event=traces,
    )


# -- costs ---------------------------------------------------------------------------


@dataclass
class LatencyStats:
    mean_ms: float
    p95_ms: float
    min_ms: float
    n: int

    @classmethod
    def of(cls, samples_ms: Sequence[float]) -> LatencyStats:
        if not samples_ms:
            raise ValueError("no latency samples")
        return cls(
            mean_ms=float(np.mean(samples_ms)),
            p95_ms=percentile(samples_ms, 95),
            min_ms=float(np.min(samples_ms)),
            n=len(samples_ms),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"mean_ms": self.mean_ms, "p95_ms": self.p95_ms, "min_ms": self.min_ms, "n": self.n}


@dataclass
class CostReport:
    corpus_triples: int
    construction_s: float
    events: int
    incremental_per_100_s: float
    rebuild_per_100_s: float
    rebuild_equal: bool
    query_latency: LatencyStats

    def to_dict(self) -> dict[str, Any]:
        return {
            "corpus_triples": self.corpus_triples,
            "construction_s": self.construction_s,
            "events": self.events,
            "incremental_per_100_s": self.incremental_per_100_s,
            "rebuild_per_100_s": self.rebuild_per_100_s,
            "rebuild_equal": self.rebuild_equal,
            "query_latency": self.query_latency.to_dict(),
        }


def batches(seq: Sequence, size: int) -> Iterator[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def measure_costs(
    corpus: Sequence[Triple],
    stream: Sequence[UpdateEvent],
    engine_factory: Callable[[KnowledgeGraph], Any],
    queries: Sequence[str],
    ontology,
    batch_size: int = 100,
) -> CostReport:
    """Time construction, per-batch incremental apply against full rebuild, and queries."""
    t = time.perf_counter()
    kg = rebuild(corpus, (), ontology)
    engine = engine_factory(kg)
    construction_s = time.perf_counter() - t

    inc_total = reb_total = 0.0
    equal = True
    applied: list[UpdateEvent] = []
    n_batches = 0
    for chunk in batches(list(stream), batch_size):
        t = time.perf_counter()
        for e in chunk:
            apply_event(kg, None, e)
        engine.refresh()
        inc_total += time.perf_counter() - t
        applied.extend(chunk)

        t = time.perf_counter()
        fresh = rebuild(corpus, applied, ontology)
        fresh_index = build_index(fresh.snapshot(), engine.encoder, engine.templates)
        reb_total += time.perf_counter() - t

        equal &= {x.id for x in fresh.live_triples()} == {x.id for x in kg.live_triples()}
        equal &= engine.state()[1].same_entries(fresh_index)
        n_batches += 1

    samples = []
    for q in queries:
        t = time.perf_counter()
        engine.answer(q)
        samples.append((time.perf_counter() - t) * 1000.0)
    scale = 100.0 / batch_size
    return CostReport(
        corpus_triples=len(corpus),
        construction_s=construction_s,
        events=len(applied),
        incremental_per_100_s=inc_total / max(1, n_batches) * scale,
        rebuild_per_100_s=reb_total / max(1, n_batches) * scale,
        rebuild_equal=equal,
        query_latency=LatencyStats.of(samples),
    )
