"""Independent reference implementations the tests compare against."""
from __future__ import annotations

import math
import random

from kgrag.retrieval import SCORE_DECIMALS, classify_query, encode_triple

QUERY_WORDS = (
    "latency", "slice", "type", "throughput", "band", "tilt", "cpu", "share", "policy", "serves",
    "connected", "profile", "5QI", "URLLC", "eMBB", "mIoT", "which", "what", "configure", "spectrum",
    "change", "cause", "maximum", "ms", "Mbps", "degrees", "upf", "gnodeb", "suitable", "for",
)


def random_queries(entities, n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    ents = sorted(entities)
    out = []
    for _ in range(n):
        words = rng.sample(QUERY_WORDS, rng.randint(1, 6))
        words += rng.sample(ents, rng.randint(0, 2))
        rng.shuffle(words)
        out.append(" ".join(words) + "?")
    return out


def brute_force_rank(kg, encoder, templates, q, recent=(), k=8, weights=(0.7, 0.2, 0.1),
                     hard_filter=False, extracted_first=False):
    """Score every live triple from scratch and sort; returns [(id, total)]."""
    w_sim, w_ont, w_ctx = weights
    qclass = classify_query(q)
    qv = encoder.query.encode(q)
    recent = set(recent)
    rows = []
    for t in kg.live_triples():
        tv = encode_triple(t, encoder.triple, templates, kg.ontology)
        sim = round(math.fsum(float(a) * float(b) for a, b in zip(qv, tv)), SCORE_DECIMALS)
        ont = 1 if kg.semantic_class(t.id) == qclass else 0
        if hard_filter and not ont:
            continue
        ents = set(kg.entities_of(t))
        ctx = len(ents & recent) / max(1, len(ents))
        total = round(w_sim * sim + w_ont * ont + w_ctx * ctx, SCORE_DECIMALS)
        rows.append((t.id, total, t.predicted))
    if extracted_first:
        rows.sort(key=lambda r: (r[2], -r[1], r[0]))
    else:
        rows.sort(key=lambda r: (-r[1], r[2], r[0]))
    return [(tid, total) for tid, total, _ in rows[:k]]


def assert_same_ranking(got, want, tol=1e-11):
    """Ids and order must match exactly; totals may differ by summation-order rounding."""
    assert [r.triple_id for r in got] == [tid for tid, _ in want]
    for r, (_, total) in zip(got, want):
        assert abs(r.total - total) <= tol, (r.triple_id, r.total, total)


# one claim per audit rule over the demo store, each firing exactly one rule
PLANTED_AUDIT = (
    (("SST_2", "suitable_for", "URLLC"), "supported"),
    (("gNodeB-43", "spectrum_band", "n78"), "outdated"),
    (("SliceProfile", "max_latency", "80ms"), "fabricated"),
    (("Slice_27", "connected_to", "UPF-Z"), "unverifiable"),
)
