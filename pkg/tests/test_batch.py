import threading
import time

import pytest

from tractprior.batch import BatchError, BatchPlan, query_pair, run_batch
from tractprior.connectome import enumerate_pairs
from tractprior.gateway import ModelSettings, RetryPolicy, TransportError
from tractprior.priors import read_records
from tractprior.prompts import Base, Ordering, PromptStrategy, Verdict

from conftest import ScriptedBackend, toy_parcellation, verdict_reply

NO_RETRY = RetryPolicy(1, 0.0, sleep=lambda s: None)
SETTINGS = ModelSettings("toy-model")


def answer_by_pair(req):
    text = req.messages[0].content
    return verdict_reply("True" if "R0" in text else "False", 0.8)


def plan(parc, pairs=None, strategy=PromptStrategy(Base.MINIMAL), repeats=1, limit=4):
    pairs = pairs if pairs is not None else enumerate_pairs(parc)
    return BatchPlan(parc, tuple(pairs), strategy, SETTINGS, frozenset(Ordering), repeats, limit, NO_RETRY)


def test_record_count():
    parc = toy_parcellation(15)
    pairs = enumerate_pairs(parc)[:100]
    records = run_batch(plan(parc, pairs, repeats=2), ScriptedBackend(fn=answer_by_pair))
    assert len(pairs) == 100 and len(records) == 400
    assert len({r.key for r in records}) == 400


def test_plan_validation():
    parc = toy_parcellation()
    with pytest.raises(ValueError):
        plan(parc, limit=0)
    with pytest.raises(ValueError):
        BatchPlan(parc, (), PromptStrategy(Base.MINIMAL), SETTINGS, frozenset(), 1)


def test_multi_turn_record():
    parc = toy_parcellation()
    b = ScriptedBackend([verdict_reply("x", None), verdict_reply("y", None), verdict_reply("False", 0.7)])
    r = query_pair(parc.pair("R0", "R1"), Ordering.FORWARD, 0, PromptStrategy(Base.CHAIN_OF_THOUGHT, True), b, SETTINGS)
    assert b.calls == 3
    assert r.classification is Verdict.FALSE
    assert r.confidence_connected == pytest.approx(0.3)
    assert r.reasoning_text == "Answer: x\n\nAnswer: y"


class CountingBackend:
    id = "counting"

    def __init__(self, delay=0.01):
        self.delay = delay
        self.in_flight = 0
        self.peak = 0
        self.spans = []
        self._lock = threading.Lock()

    def send(self, request):
        with self._lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        start = time.perf_counter()
        time.sleep(self.delay)
        with self._lock:
            self.in_flight -= 1
            self.spans.append((start, time.perf_counter()))
        return verdict_reply("True")


@pytest.mark.parametrize("limit", [1, 3])
def test_concurrency_bound(limit):
    parc = toy_parcellation(6)
    b = CountingBackend()
    run_batch(plan(parc, limit=limit), b)
    assert b.peak <= limit
    if limit == 1:
        spans = sorted(b.spans)
        assert all(e <= s for (_, e), (s, _) in zip(spans, spans[1:]))


def test_warm_cache_zero_calls(tmp_path):
    parc = toy_parcellation(5)
    cache = tmp_path / "records.jsonl"
    first = run_batch(plan(parc), ScriptedBackend(fn=answer_by_pair), cache)
    b = ScriptedBackend(fn=answer_by_pair)
    second = run_batch(plan(parc), b, cache)
    assert b.calls == 0
    assert first == second


def test_resume_after_interruption(tmp_path):
    parc = toy_parcellation(5)
    cache = tmp_path / "records.jsonl"
    n = {"k": 0}

    def flaky(req):
        n["k"] += 1
        return TransportError("gone") if n["k"] > 7 else answer_by_pair(req)

    partial = run_batch(plan(parc, limit=1), ScriptedBackend(fn=flaky), cache)
    assert sum(r.ok for r in partial) == 7
    b = ScriptedBackend(fn=answer_by_pair)
    full = run_batch(plan(parc), b, cache)
    assert b.calls == len(full) - 7
    assert all(r.ok for r in full)
    assert read_records(cache, parc) == full


def test_isolation_across_plans():
    parc = toy_parcellation(6)
    pairs = enumerate_pairs(parc)
    alone = run_batch(plan(parc, pairs[:1]), ScriptedBackend(fn=answer_by_pair))
    together = run_batch(plan(parc, pairs), ScriptedBackend(fn=answer_by_pair))
    assert [r for r in together if r.pair.key == pairs[0].key] == alone


def test_failures_recorded_batch_continues():
    parc = toy_parcellation(4)

    def some_fail(req):
        return TransportError("x") if "R3" in req.messages[0].content else verdict_reply("True")

    records = run_batch(plan(parc), ScriptedBackend(fn=some_fail))
    failed = [r for r in records if not r.ok]
    assert failed and all("R3" in r.pair.key for r in failed)
    assert all(r.ok for r in records if "R3" not in r.pair.key)


def test_all_failed_raises():
    with pytest.raises(BatchError):
        run_batch(plan(toy_parcellation(3)), ScriptedBackend(fn=lambda r: TransportError("x")))


def test_unparseable_reply_is_failed_record():
    parc = toy_parcellation(3)
    b = ScriptedBackend(fn=lambda r: verdict_reply("maybe"))
    r = query_pair(parc.pair("R0", "R1"), Ordering.FORWARD, 0, PromptStrategy(Base.MINIMAL), b, SETTINGS)
    assert not r.ok and r.error.startswith("ParseError")
