from __future__ import annotations

import io
import json
import random
import urllib.error

import pytest
from hypothesis import given, strategies as st

from kgrag.genclient import (
    ABSTAIN,
    API_KEY_ENV,
    BackendTransportError,
    CitationIntegrityError,
    Draft,
    HTTPBackend,
    MockBackend,
    MockRule,
    generate,
    parse_mock_rules,
)
from kgrag.kg_store import Provenance, Triple
from kgrag.verbalizer import build_prompt

PROV = Provenance("3gpp://TS23.501/5.15.2.2", 2, "spec", "2024-03-01T00:00:00Z")
SST2 = Triple("SST_2", "suitable_for", "URLLC", PROV, PROV.revision_date)
LAT50 = Triple("SliceProfile", "max_latency", "50ms", PROV, PROV.revision_date)


class FixedBackend:
    backend_id = "fixed"

    def __init__(self, draft: Draft):
        self._draft = draft

    def draft(self, prompt):
        return self._draft


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps: list[float] = []

    def __call__(self) -> float:
        return self.now

    def sleep(self, s: float) -> None:
        self.sleeps.append(s)
        self.now += s


class Response(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def completion(text: str) -> Response:
    return Response(json.dumps({"choices": [{"message": {"content": text}}]}).encode())


def scripted_opener(script, calls):
    """Each call pops the next item: an exception is raised, anything else returned."""

    def opener(req, timeout):
        calls.append((req, timeout))
        item = script.pop(0)
        if isinstance(item, BaseException):
            raise item
        return item

    return opener


def http_error(code: int) -> urllib.error.HTTPError:
    return urllib.error.HTTPError("http://x", code, "err", {}, None)


# -- mock ----------------------------------------------------------------------------


def test_configured_mock_rule_answers_verbatim(templates):
    rule = MockRule("urllc", "Configure the slice as SST Type 2 (URLLC).",
                    evidence=r"is suitable for URLLC applications\.$")
    p = build_prompt([SST2], "Which SST for URLLC?", templates)
    a = generate(MockBackend([rule]), p)
    assert a.text == "Configure the slice as SST Type 2 (URLLC)."
    assert a.cited_tags == ("T1",)
    assert a.claims == (("SST_2", "suitable_for", "URLLC"),)


def test_empty_prompt_abstains(templates, mock_backend):
    a = generate(mock_backend, build_prompt([], "Which SST for URLLC?", templates), templates)
    assert a.text == ABSTAIN and a.cited_tags == () and a.explanation is None


def test_bundled_rules_answer_urllc_question(templates, mock_backend):
    p = build_prompt([LAT50, SST2], "Which SST for URLLC?", templates)
    a = generate(mock_backend, p, templates)
    assert a.text == "Configure the slice as SST Type 2 (URLLC)."
    assert "T2" in a.cited_tags


def test_latency_rule_cites_both_lines_and_explains(templates, mock_backend):
    q = "Which slice type should I configure for a service requiring under 50 ms latency?"
    a = generate(mock_backend, build_prompt([LAT50, SST2], q, templates), templates)
    assert a.text == "Configure the slice as SST Type 2 (URLLC)."
    assert set(a.cited_tags) == {"T1", "T2"}
    assert a.explanation == "This satisfies the 50 ms latency requirement defined in the slice profile."


def test_question_groups_constrain_evidence(templates):
    rule = MockRule("svc", "{svc}", question=r"for (?P<svc>\w+)\?", evidence=r"suitable for {svc} ")
    p = build_prompt([SST2], "Which SST for eMBB?", templates)
    assert rule.fire(p) is None
    assert rule.fire(build_prompt([SST2], "Which SST for URLLC?", templates)).text == "URLLC"


def test_mock_is_deterministic(templates, mock_backend):
    p = build_prompt([LAT50, SST2], "Which SST for URLLC?", templates)
    a, b = generate(mock_backend, p, templates), generate(mock_backend, p, templates)
    assert a.to_dict(with_latency=False) == b.to_dict(with_latency=False)


def test_bad_citation_is_quarantined(templates):
    rule = MockRule("liar", "made up", tags=("T7",))
    with pytest.raises(CitationIntegrityError) as err:
        generate(MockBackend([rule]), build_prompt([SST2], "q?", templates))
    assert err.value.bad_tags == ["T7"]
    assert err.value.quarantined.text == "made up"


@given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 5))
def test_citation_fuzz_rejects_every_unknown_tag(templates, cited, n_lines):
    p = build_prompt([SST2, LAT50, SST2, LAT50, SST2][:n_lines], "q?", templates)
    tags = tuple(f"T{i}" for i in cited)
    backend = FixedBackend(Draft("x", tags))
    if all(i <= n_lines for i in cited):
        assert generate(backend, p).cited_tags == tags
    else:
        with pytest.raises(CitationIntegrityError) as err:
            generate(backend, p)
        assert set(err.value.bad_tags) == {t for t in tags if int(t[1:]) > n_lines}


def test_parse_mock_rules_requires_answer():
    with pytest.raises(ValueError, match="rule 0"):
        parse_mock_rules([{"evidence": "x"}])


# -- http -------------------------------------------------------------------------------


def test_http_backend_parses_completion_and_tags(templates, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sekret")
    calls = []
    b = HTTPBackend("http://llm/v1/chat/completions", "m1",
                    opener=scripted_opener([completion("SST 2 [T1] fits [T2] [T1]")], calls))
    a = generate(b, build_prompt([SST2, LAT50], "q?", templates))
    assert a.cited_tags == ("T1", "T2") and a.backend_id == "http:m1"
    req = calls[0][0]
    assert req.get_header("Authorization") == "Bearer sekret"
    body = json.loads(req.data)
    assert body["model"] == "m1" and body["messages"][1]["content"].startswith("Context:")


def test_http_retries_on_server_errors_with_backoff(templates):
    clock, calls = FakeClock(), []
    script = [http_error(503), urllib.error.URLError("down"), http_error(429), completion("ok [T1]")]
    b = HTTPBackend("http://llm", "m", sleep=clock.sleep, clock=clock, opener=scripted_opener(script, calls))
    assert b.draft(build_prompt([SST2], "q?", templates)).text == "ok [T1]"
    assert clock.sleeps == [0.5, 1.0, 2.0]
    assert len(calls) == 4


def test_http_gives_up_after_retry_budget(templates):
    clock, calls = FakeClock(), []
    script = [http_error(500)] * 10
    b = HTTPBackend("http://llm", "m", sleep=clock.sleep, clock=clock, opener=scripted_opener(script, calls))
    with pytest.raises(BackendTransportError, match="after retries"):
        b.draft(build_prompt([SST2], "q?", templates))
    assert len(calls) == 4


def test_http_client_error_is_not_retried(templates):
    clock, calls = FakeClock(), []
    b = HTTPBackend("http://llm", "m", sleep=clock.sleep, clock=clock,
                    opener=scripted_opener([http_error(401)], calls))
    with pytest.raises(BackendTransportError, match="401"):
        b.draft(build_prompt([SST2], "q?", templates))
    assert clock.sleeps == []


def test_http_respects_total_timeout(templates):
    clock, calls = FakeClock(), []

    def slow(req, timeout):
        calls.append(timeout)
        clock.now += 20
        raise TimeoutError()

    b = HTTPBackend("http://llm", "m", sleep=clock.sleep, clock=clock, opener=slow)
    with pytest.raises(BackendTransportError):
        b.draft(build_prompt([SST2], "q?", templates))
    assert calls[0] == 30.0
    assert clock.now <= 30.0 + 20


def test_http_malformed_response(templates):
    b = HTTPBackend("http://llm", "m", opener=scripted_opener([Response(b'{"choices": []}')], []))
    with pytest.raises(BackendTransportError, match="malformed"):
        b.draft(build_prompt([SST2], "q?", templates))


def test_answer_rejects_negative_latency():
    from kgrag.genclient import Answer

    with pytest.raises(ValueError):
        Answer("x", (), None, -1.0, "mock")


def test_random_rules_never_cite_outside_prompt(templates, mock_backend, demo_kg):
    rng = random.Random(3)
    triples = sorted(demo_kg.live_triples(), key=lambda t: t.id)
    for _ in range(50):
        ev = rng.sample(triples, rng.randint(0, 8))
        q = rng.choice(["Which SST for URLLC?", "Why is throughput low?", "What CPU share is UPF-X scaled to?"])
        p = build_prompt(ev, q, templates)
        assert set(generate(mock_backend, p, templates).cited_tags) <= set(p.tags)
