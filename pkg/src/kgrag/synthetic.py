"""Generated graphs and scenarios used by tests, benchmarks and the bundled demo."""
from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Sequence

from .kg_store import KnowledgeGraph, Provenance, Triple
from .ontology import EntityType, Ontology, RelationType, Signature

TOY_EPOCH = "2024-01-01T00:00:00Z"
TOY_STEPS = (1, 2, 3)


def toy_ontology(steps: Sequence[int] = TOY_STEPS) -> Ontology:
    """Integer-line nodes ``n0, n1, ...`` with one "+k step" relation per k."""
    return Ontology(
        entity_types=(EntityType("Node", "point on the integer line", id_pattern=r"n\d+"),),
        relation_types=tuple(
            RelationType(f"step{k}", False, "structural", f"+{k} step") for k in steps
        ),
        signatures=tuple(Signature("Node", f"step{k}", "Node") for k in steps),
    )


def toy_edges(n: int = 20, steps: Sequence[int] = (1,)) -> list[tuple[str, str, str]]:
    return [(f"n{i}", f"step{k}", f"n{i + k}") for k in steps for i in range(n - k)]


def toy_split(
    n: int = 20, holdout: float = 0.1, seed: int = 0, steps: Sequence[int] = (1,)
) -> tuple[list, list]:
    """Split toy edges into (train, held-out), every node still touched by training."""
    edges = toy_edges(n, steps)
    rng = random.Random(seed)
    want = max(1, round(holdout * len(edges)))
    while True:
        held = rng.sample(edges, want)
        train = [e for e in edges if e not in held]
        covered = {x for s, _, o in train for x in (s, o)}
        if len(covered) == n:
            return train, sorted(held)


def toy_graph(edges: Sequence[tuple[str, str, str]]) -> KnowledgeGraph:
    kg = KnowledgeGraph(toy_ontology())
    prov = Provenance("synthetic://toy", 0, "synthetic", TOY_EPOCH)
    kg.insert_many(Triple(s, r, o, prov, TOY_EPOCH) for s, r, o in edges)
    return kg


# -- demo store and Slice-27 scenario ----------------------------------------------

SPEC_DATE = "2024-03-01T00:00:00Z"
INVENTORY_DATE = "2025-05-01T00:00:00Z"
SCENARIO_SEED = 27
GNODEBS = tuple(f"gNodeB-{i}" for i in range(40, 48))
UPFS = ("UPF-X", "UPF-Y", "UPF-Z")
SLICES = ("Slice_27", "Slice_28", "Slice_29")
BANDS = ("n1", "n3", "n28", "n41", "n77", "n78")
POLICIES = ("balanced", "latency-first", "throughput-first", "energy-saver", "gold-sla")
SST_ROWS = (("SST_1", "eMBB"), ("SST_2", "URLLC"), ("SST_3", "mIoT"), ("SST_4", "V2X"), ("SST_5", "HMTC"))
SPECTRUM_EVENT = {
    "event_id": "CHG-10245",
    "timestamp": "2025-06-01T03:15:00Z",
    "kind": "spectrum_reassign",
    "target": "gNodeB-43",
    "payload": {"band": "n77"},
}


def _t(s: str, r: str, o: str, uri: str, para: int, family: str, date: str) -> Triple:
    return Triple(s, r, o, Provenance(uri, para, family, date), date)


def _initial_attributes() -> dict[tuple[str, str], str]:
    rng = random.Random(SCENARIO_SEED)
    attrs: dict[tuple[str, str], str] = {}
    for g in GNODEBS:
        attrs[(g, "spectrum_band")] = "n78" if g == "gNodeB-43" else rng.choice(BANDS)
        attrs[(g, "tilt_deg")] = "4.5deg" if g == "gNodeB-42" else f"{rng.randint(4, 16) / 2:g}deg"
    for u in UPFS:
        attrs[(u, "cpu_share")] = "60%" if u == "UPF-X" else f"{rng.randrange(30, 90, 5)}%"
    for s in SLICES:
        attrs[(s, "policy")] = "balanced"
    return attrs


def demo_base_triples() -> list[Triple]:
    """The demo network before the 03:15 spectrum change."""
    out = []
    for i, (sst, svc) in enumerate(SST_ROWS, 1):
        out.append(_t(sst, "suitable_for", svc, "3gpp://TS23.501/5.15.2.2", i, "spec", SPEC_DATE))
    profile = "3gpp://TS28.541/slice-profile-urllc"
    out += [
        _t("SliceProfile", "have", "SST_2", profile, 0, "spec", SPEC_DATE),
        _t("SliceProfile", "max_latency", "50ms", profile, 1, "spec", SPEC_DATE),
        _t("SliceProfile", "mapped_to", "5QI_92", profile, 2, "spec", SPEC_DATE),
    ]
    inv = "inventory://ran/topology"
    topology = [
        ("gNodeB-42", "serves", "Slice_27"), ("gNodeB-43", "serves", "Slice_27"),
        ("Slice_27", "connected_to", "UPF-X"), ("Slice_27", "connected_to", "UPF-Y"),
        ("Slice_27", "connected_to", "MEC-1"),
        ("gNodeB-40", "serves", "Slice_28"), ("gNodeB-41", "serves", "Slice_28"),
        ("gNodeB-44", "serves", "Slice_28"), ("gNodeB-45", "serves", "Slice_29"),
        ("gNodeB-46", "serves", "Slice_29"), ("gNodeB-47", "serves", "Slice_29"),
        ("Slice_28", "connected_to", "UPF-Z"), ("Slice_29", "connected_to", "UPF-Z"),
    ]
    out += [_t(s, r, o, inv, i, "telemetry", INVENTORY_DATE) for i, (s, r, o) in enumerate(topology)]
    for i, ((s, r), o) in enumerate(sorted(_initial_attributes().items())):
        out.append(_t(s, r, o, "inventory://config/baseline", i, "telemetry", INVENTORY_DATE))
    out += [
        _t("gNodeB-42", "throughput", "450Mbps", "telemetry://kpi/gNodeB-42", 0, "telemetry",
           "2025-06-01T03:20:00Z"),
        _t("gNodeB-42", "past_incident", "antenna_tilt@2025-04-12", "ticket://TT-20250412-7", 0,
           "log", "2025-04-12T00:00:00Z"),
        _t("gNodeB-42", "documented_in", "doc:vendor-throughput-degradation-guide",
           "vendor://throughput-degradation-guide", 12, "vendor_doc", "2025-01-15T00:00:00Z"),
    ]
    return out


def build_demo_store(ontology: Ontology) -> KnowledgeGraph:
    """Demo network with the gNodeB-43 spectrum reassignment at 03:15 applied."""
    from .dynamics import UpdateEvent, apply_event

    kg = KnowledgeGraph(ontology)
    kg.insert_many(demo_base_triples())
    apply_event(kg, None, UpdateEvent.from_dict(SPECTRUM_EVENT))
    return kg


PROBE_QUERIES = {
    "spectrum_band": "Which spectrum band is {target} operating on?",
    "tilt_deg": "What antenna tilt is configured on {target}?",
    "cpu_share": "What CPU share is {target} scaled to?",
    "policy": "Which slice policy does {display} run?",
}


def expected_answer(relation: str, obj: str) -> str:
    """The answer string the bundled mock rules give for an attribute value."""
    if relation == "tilt_deg":
        return obj[: -len("deg")] + " degrees"
    return obj


def slice27_scenario(
    ontology: Ontology, n_events: int = 200, spacing_s: int = 30, seed: int = SCENARIO_SEED
) -> tuple[list, list]:
    """(events, probes) for the 200-event Slice-27 stream after the 03:15 change.

    Every event changes its attribute; each (target, attribute) pair gets one
    probe, triggered by the first event that touches it.
    """
    from datetime import timedelta

    from .dynamics import DERIVATIONS, Probe, UpdateEvent
    from .kg_store import parse_ts

    rng = random.Random(seed)
    state = dict(_initial_attributes())
    state[("gNodeB-43", "spectrum_band")] = SPECTRUM_EVENT["payload"]["band"]
    pre = dict(state)
    start = parse_ts("2025-06-01T04:00:00Z")
    targets = {"spectrum_reassign": GNODEBS, "tilt_adjust": GNODEBS, "upf_scale": UPFS,
               "slice_policy_change": SLICES}
    events, probes, seen = [], [], set()
    for i in range(n_events):
        kind = rng.choice(sorted(targets))
        target = rng.choice(targets[kind])
        _, relation, key, fmt = DERIVATIONS[kind]
        current = state[(target, relation)]
        while True:
            if kind == "spectrum_reassign":
                value: object = rng.choice(BANDS)
            elif kind == "tilt_adjust":
                value = rng.randint(4, 16) / 2
            elif kind == "upf_scale":
                value = rng.randrange(30, 95, 5)
            else:
                value = rng.choice(POLICIES)
            if fmt(value) != current:
                break
        ts = (start + timedelta(seconds=i * spacing_s)).strftime("%Y-%m-%dT%H:%M:%SZ")
        e = UpdateEvent(f"EV-{i + 1:04d}", ts, kind, target, {key: value})
        events.append(e)
        state[(target, relation)] = fmt(value)
        if (target, relation) not in seen:
            seen.add((target, relation))
            display = ontology.display(target)
            probes.append(Probe(
                PROBE_QUERIES[relation].format(target=target, display=display),
                expected_answer(relation, pre[(target, relation)]),
                expected_answer(relation, fmt(value)),
                e.event_id,
            ))
    return events, probes


DEMO_QUERIES = (
    "Which slice type should I configure for a service requiring under 50 ms latency?",
    "Which SST for URLLC?",
    "Which SST should I configure for eMBB?",
    "What is the maximum latency for this slice profile?",
    "What's causing the issue in Slice 27, and how to fix it now?",
    "What is the throughput of gNodeB-42?",
    "Which spectrum band is gNodeB-43 operating on?",
    "What antenna tilt is configured on gNodeB-42?",
    "What CPU share is UPF-X scaled to?",
    "Which slice policy does Slice 27 run?",
)


# -- desk-scale corpus ----------------------------------------------------------------


def synthetic_corpus(ontology: Ontology, n_triples: int = 500, seed: int = 7) -> list[Triple]:
    """Telecom-shaped triples over generated entities, about ``n_triples`` of them."""
    rng = random.Random(seed)
    out: dict[str, Triple] = {}

    def add(s: str, r: str, o: str, family: str = "telemetry") -> None:
        day = 1 + rng.randrange(28)
        date = f"2025-02-{day:02d}T00:00:00Z"
        t = Triple(s, r, o, Provenance(f"synthetic://corpus/{family}", len(out), family, date), date)
        if ontology.permits_triple(*t.key):
            out.setdefault(t.id, t)

    for i, (sst, svc) in enumerate(SST_ROWS):
        add(sst, "suitable_for", svc, "spec")
    n_cells = max(4, n_triples // 7)
    cells = [f"gNodeB-{100 + i}" for i in range(n_cells)]
    slices = [f"Slice_{100 + i}" for i in range(max(2, n_cells // 4))]
    upfs = [f"UPF-{chr(65 + i % 26)}{i // 26}" for i in range(max(2, n_cells // 6))]
    profiles = [f"SliceProfile_{s.split('_')[1]}" for s in slices]
    for p in profiles:
        sst = rng.choice(SST_ROWS)[0]
        add(p, "have", sst, "spec")
        add(p, "max_latency", f"{rng.choice((5, 10, 20, 50, 100))}ms", "spec")
        add(p, "mapped_to", f"5QI_{rng.choice((1, 5, 9, 82, 92))}", "spec")
    for s, p in zip(slices, profiles):
        add(s, "have", p)
        add(s, "identified_by", rng.choice(SST_ROWS)[0])
        add(s, "connected_to", rng.choice(upfs))
        add(s, "policy", rng.choice(POLICIES))
    for c in cells:
        if len(out) >= n_triples:
            break
        add(c, "serves", rng.choice(slices))
        add(c, "spectrum_band", rng.choice(BANDS))
        add(c, "tilt_deg", f"{rng.randint(4, 16) / 2:g}deg")
        add(c, "throughput", f"{rng.randrange(100, 900, 10)}Mbps")
        add(c, "connected_to", rng.choice(upfs))
        add(c, "last_change", f"tilt_adjust@{rng.randrange(24):02d}:{rng.randrange(60):02d}", "log")
    for u in upfs:
        add(u, "cpu_share", f"{rng.randrange(30, 95, 5)}%")
    return sorted(out.values(), key=lambda t: t.id)[:n_triples] if len(out) > n_triples else sorted(
        out.values(), key=lambda t: t.id
    )


def corpus_events(corpus: Sequence[Triple], n_events: int = 100, seed: int = 11) -> list:
    """Change events over the gNodeBs and UPFs of a generated corpus."""
    from datetime import timedelta

    from .dynamics import UpdateEvent
    from .kg_store import parse_ts

    rng = random.Random(seed)
    cells = sorted({t.subject for t in corpus if t.subject.startswith("gNodeB-")})
    upfs = sorted({t.subject for t in corpus if t.subject.startswith("UPF-")})
    start = parse_ts("2025-03-01T00:00:00Z")
    events = []
    for i in range(n_events):
        ts = (start + timedelta(seconds=60 * i)).strftime("%Y-%m-%dT%H:%M:%SZ")
        roll = rng.random()
        if roll < 0.4:
            events.append(UpdateEvent(f"C-{i:04d}", ts, "tilt_adjust", rng.choice(cells),
                                      {"tilt_deg": rng.randint(4, 16) / 2}))
        elif roll < 0.8 or not upfs:
            events.append(UpdateEvent(f"C-{i:04d}", ts, "spectrum_reassign", rng.choice(cells),
                                      {"band": rng.choice(BANDS)}))
        else:
            events.append(UpdateEvent(f"C-{i:04d}", ts, "upf_scale", rng.choice(upfs),
                                      {"cpu_share": rng.randrange(30, 95, 5)}))
    return events


# -- bundled files ---------------------------------------------------------------------


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def render_bundled(ontology: Ontology) -> dict[str, str]:
    """File name -> exact text of every generated file shipped in ``kgrag/data``."""
    events, probes = slice27_scenario(ontology)
    corpus = synthetic_corpus(ontology)
    return {
        "demo_kg.jsonl": build_demo_store(ontology).dumps(),
        "slice27_stream.jsonl": _jsonl(e.to_dict() for e in events),
        "slice27_probes.jsonl": _jsonl(p.to_dict() for p in probes),
        "demo_queries.jsonl": _jsonl({"query": q} for q in DEMO_QUERIES),
        "corpus500.jsonl": "".join(
            json.dumps(t.to_record(False), ensure_ascii=False) + "\n" for t in corpus
        ),
        "cost_stream.jsonl": _jsonl(e.to_dict() for e in corpus_events(corpus)),
    }


def main() -> None:
    from importlib import resources

    from .ontology import load_ontology

    target = Path(str(resources.files("kgrag.data")))
    for name, text in render_bundled(load_ontology()).items():
        (target / name).write_text(text, encoding="utf-8")
        print(f"wrote {target / name}")


if __name__ == "__main__":
    main()
