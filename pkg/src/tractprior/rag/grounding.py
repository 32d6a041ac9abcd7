"""Retrieval-grounded prompting: region summaries and citation-backed verdicts."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from typing import Sequence

from ..connectome import RegionPair
from ..gateway import Backend, ChatResponse, ModelSettings, RetryPolicy, complete, converse
from ..priors import CitationRecord, PriorError, PriorRecord, confidence_from_response, failed_record
from ..prompts import (
    DEFAULT_TEMPLATES,
    Base,
    ContextChunk,
    Message,
    Ordering,
    ParseError,
    PromptStrategy,
    Role,
    Templates,
    parse_classification,
    render_rag_citation,
    render_region_summary,
)
from .index import CorpusIndex, Embedder, Reranker, bm25_search, hybrid_search, rerank

RAG_STRATEGY = PromptStrategy(Base.RAG_CITATION, True)
JSON_REMINDER = "Return a JSON object only, with the keys 'connection', 'evidence' and 'citations'."


def verify_citations(citations: Sequence[CitationRecord], index: CorpusIndex) -> list[CitationRecord]:
    """A citation is verified only if its PMCID is indexed and the title matches (ignoring case)."""
    out = []
    for c in citations:
        stored = index.titles.get(c.pmcid)
        ok = stored is not None and stored.casefold() == c.title.casefold()
        out.append(CitationRecord(c.title, c.pmcid, c.quote, ok))
    return out


_JSON_BLOCK = re.compile(r"\{.*\}", re.DOTALL)


def parse_answer_json(text: str) -> dict:
    """Extract the answer object, tolerating code fences or stray prose around it."""
    m = _JSON_BLOCK.search(text)
    if not m:
        raise ParseError("no JSON object in response")
    try:
        obj = json.loads(m.group(0))
    except ValueError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict) or "connection" not in obj:
        raise ParseError("JSON answer lacks a 'connection' key")
    return obj


def _citations_from(obj: dict) -> list[CitationRecord]:
    raw = obj.get("citations") or []
    if isinstance(raw, dict):
        raw = [raw]
    out = []
    for c in raw:
        if isinstance(c, dict):
            out.append(CitationRecord(str(c.get("title", "")), str(c.get("pmcid", "")).strip(), str(c.get("quote", ""))))
    return out


def _evidence_text(obj: dict) -> str | None:
    ev = obj.get("evidence")
    if ev is None:
        return None
    if isinstance(ev, list):
        return "\n".join(str(e) for e in ev)
    return str(ev)


def connection_query(pair: RegionPair, ordering: Ordering) -> str:
    r1, r2 = (pair.a.name, pair.b.name) if ordering is Ordering.FORWARD else (pair.b.name, pair.a.name)
    return f"white matter connection between {spaced_name(r1)} and {spaced_name(r2)}"


def spaced_name(name: str) -> str:
    """``SuperiorFrontal`` -> ``Superior Frontal`` so keyword search sees the words."""
    return re.sub(r"(?<=[a-z])(?=[A-Z])", " ", name).replace("_", " ")


def region_query(name: str) -> str:
    spaced = spaced_name(name)
    return name if spaced == name else f"{name} {spaced}"


def grounded_query(
    index: CorpusIndex,
    pair: RegionPair,
    backend: Backend,
    settings: ModelSettings,
    embedder: Embedder | None,
    reranker: Reranker | None = None,
    fallback_reranker: Reranker | None = None,
    ordering: Ordering = Ordering.FORWARD,
    repeat: int = 0,
    retry: RetryPolicy = RetryPolicy(),
    templates: Templates = DEFAULT_TEMPLATES,
    k_candidates: int = 20,
    top_n: int = 5,
    parcellation_id: str = "",
) -> PriorRecord:
    """Ask for a cited JSON verdict over reranked chunks, then check the citations against the index."""
    ordering = Ordering(ordering)
    query = connection_query(pair, ordering)
    found = hybrid_search(index, query, embedder, k_candidates)
    flags = ["bm25_only"] if found.bm25_only else []
    ranked = rerank(found.hits, query, reranker, fallback_reranker, top_n)
    if ranked.fallback_used:
        flags.append("rerank_fallback")
    base = dict(parcellation_id=parcellation_id, model_id=settings.model_id)
    if not ranked.hits:
        return failed_record(pair, ordering, repeat, RAG_STRATEGY, "no context retrieved", flags=tuple(flags), **base)
    chunks = [ContextChunk(h.chunk.text, h.chunk.title, h.chunk.pmcid) for h in ranked.hits]
    seq = render_rag_citation(pair, chunks, ordering, templates)

    conv = converse(seq, backend, settings, sample_index=repeat, retry=retry)
    resp: ChatResponse = conv.final
    usage = conv.usage
    digests = [conv.digest]
    try:
        obj = parse_answer_json(resp.text)
    except ParseError:
        # one corrective turn in the same session
        history = [*seq.messages, Message(Role.ASSISTANT, resp.text), Message(Role.USER, JSON_REMINDER)]
        req = settings.request(history, repeat)
        resp = complete(req, backend, retry)
        usage = usage + resp.usage
        digests.append(req.digest)
        try:
            obj = parse_answer_json(resp.text)
        except ParseError as exc:
            return failed_record(pair, ordering, repeat, RAG_STRATEGY, f"parse_failure: {exc}",
                                 reasoning_text=resp.text, raw_response_digest=digests[-1], usage=usage,
                                 flags=tuple(flags), **base)
    common = dict(raw_response_digest=digests[-1], usage=usage, **base)
    try:
        cls = parse_classification(str(obj["connection"]), upv=True)
        conf = confidence_from_response(resp, cls, which="first")
    except (ParseError, PriorError) as exc:
        return failed_record(pair, ordering, repeat, RAG_STRATEGY, f"{type(exc).__name__}: {exc}",
                             flags=tuple(flags), **common)
    citations = verify_citations(_citations_from(obj), index)
    return PriorRecord(
        pair=pair,
        ordering=ordering,
        repeat=repeat,
        strategy=RAG_STRATEGY,
        classification=cls,
        confidence_connected=conf.confidence_connected,
        verdict_token_logprob=conf.verdict_token_logprob,
        abstained=conf.abstained,
        reasoning_text=_evidence_text(obj),
        citations=tuple(citations),
        flags=tuple(flags) + conf.flags,
        **common,
    )


@dataclass(frozen=True)
class RegionContext:
    region: str
    summary: str
    chunk_ids: tuple[str, ...]

    @property
    def empty(self) -> bool:
        return not self.chunk_ids


def region_context(
    index: CorpusIndex,
    region_name: str,
    backend: Backend,
    settings: ModelSettings,
    k: int = 3,
    retry: RetryPolicy = RetryPolicy(),
    templates: Templates = DEFAULT_TEMPLATES,
) -> RegionContext:
    """Summarise where a region lies from its top keyword-search chunks."""
    hits = bm25_search(index, region_query(region_name), k)
    if not hits:
        return RegionContext(region_name, "", ())
    context = "\n\n".join(h.chunk.text for h in hits)
    conv = converse(render_region_summary(region_name, context, templates), backend, settings, retry=retry)
    return RegionContext(region_name, conv.final.text.strip(), tuple(h.chunk.chunk_id for h in hits))


def combine_contexts(contexts: Sequence[RegionContext]) -> str | None:
    parts = [f"{c.region}: {c.summary}" for c in contexts if not c.empty and c.summary]
    return "\n\n".join(parts) or None


class RegionContextProvider:
    """Per-region summaries, computed once and shared across a batch."""

    def __init__(self, index: CorpusIndex, backend: Backend, settings: ModelSettings, k: int = 3,
                 retry: RetryPolicy = RetryPolicy(), templates: Templates = DEFAULT_TEMPLATES):
        self.index, self.backend, self.settings = index, backend, settings
        self.k, self.retry, self.templates = k, retry, templates
        self._cache: dict[str, RegionContext] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def get(self, region_name: str) -> RegionContext:
        with self._guard:
            lock = self._locks.setdefault(region_name, threading.Lock())
        with lock:
            if region_name not in self._cache:
                self._cache[region_name] = region_context(
                    self.index, region_name, self.backend, self.settings, self.k, self.retry, self.templates
                )
            return self._cache[region_name]

    def __call__(self, pair: RegionPair, ordering: Ordering) -> str | None:
        first, second = (pair.a, pair.b) if Ordering(ordering) is Ordering.FORWARD else (pair.b, pair.a)
        return combine_contexts([self.get(first.name), self.get(second.name)])

    @property
    def empty_regions(self) -> list[str]:
        return sorted(r for r, c in self._cache.items() if c.empty)
