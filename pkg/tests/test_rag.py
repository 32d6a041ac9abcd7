import json
import math
import random
import string
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tractprior.gateway import ModelSettings, RetryPolicy
from tractprior.prompts import Verdict
from tractprior.rag import (
    CorpusIndex,
    CosineReranker,
    Document,
    DocumentChunk,
    HashingEmbedder,
    RerankerError,
    RetrievalHit,
    bm25_search,
    grounded_query,
    hybrid_search,
    index_chunks,
    ingest,
    parse_answer_json,
    reciprocal_rank_fusion,
    recursive_split,
    rerank,
    semantic_chunks,
    tokenize,
    verify_citations,
)
from tractprior.priors import CitationRecord
from tractprior.prompts import ParseError

from conftest import ScriptedBackend, toy_parcellation

EMB = HashingEmbedder(64)


# chunking

def test_chunking_hand_simulation():
    # 500 five-char words fill 2500; the last 40 words (200 chars) carry over
    text = "abcd " * 1000
    chunks = recursive_split(text, 2500, 200)
    assert len(chunks) == 3
    words = text.split()
    starts = [0, 460, 920]
    ends = [500, 960, 1000]
    for c, s, e in zip(chunks, starts, ends):
        assert c == " ".join(words[s:e])
        assert len(c) <= 2500


def test_short_document_single_chunk():
    assert recursive_split("A short note.", 2500, 200) == ["A short note."]


@pytest.mark.parametrize("size,overlap", [(200, 200), (100, 300), (10, -1)])
def test_bad_overlap(size, overlap):
    with pytest.raises(ValueError):
        recursive_split("x", size, overlap)


@given(st.lists(st.sampled_from(["alpha", "be", "gamma.", "\n\n", "delta!", "x" * 40, " "]), max_size=200),
       st.integers(20, 120), st.integers(0, 19))
def test_chunks_bounded_and_cover_words(parts, size, overlap):
    text = " ".join(parts)
    chunks = recursive_split(text, size, overlap)
    assert all(len(c) <= size for c in chunks)
    # every word of the document appears in order across the chunks
    joined = " ".join(chunks)
    for w in set(text.split()):
        assert w[:size] in joined


def test_semantic_chunks_window():
    text = " ".join(f"Sentence {i}." for i in range(12))
    assert len(semantic_chunks(text, window=5)) == 3
    assert semantic_chunks("", window=5) == []


# BM25 against the formula written out directly

def bm25_oracle(docs, query, k1=1.2, b=0.75):
    toks = [tokenize(d) for d in docs]
    n = len(docs)
    avgdl = sum(map(len, toks)) / n
    out = []
    for i, t in enumerate(toks):
        tf = Counter(t)
        s = 0.0
        for q in tokenize(query):
            df = sum(1 for u in toks if q in u)
            if tf[q] == 0:
                continue
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf[q] * (k1 + 1) / (tf[q] + k1 * (1 - b + b * len(t) / avgdl))
        out.append(s)
    return out


def random_corpus(rng, n_chunks):
    vocab = ["".join(rng.choice(list(string.ascii_lowercase), 3)) for _ in range(30)]
    docs = [" ".join(rng.choice(vocab, rng.integers(1, 40))) for _ in range(n_chunks)]
    query = " ".join(rng.choice(vocab, rng.integers(1, 9)))
    return docs, query


def make_index(docs, titles=None, pmcids=None):
    chunks = [DocumentChunk(f"c{i:03d}", d, (titles or [""] * len(docs))[i], (pmcids or [""] * len(docs))[i])
              for i, d in enumerate(docs)]
    return index_chunks(chunks, EMB)


def check_bm25(docs, query):
    index = make_index(docs)
    expected = bm25_oracle(docs, query)
    hits = bm25_search(index, query, len(docs))
    want = sorted(((s, f"c{i:03d}") for i, s in enumerate(expected) if s > 0), key=lambda x: (-x[0], x[1]))
    assert [h.chunk.chunk_id for h in hits] == [c for _, c in want]
    for h, (s, _) in zip(hits, want):
        assert abs(h.score - s) <= 1e-9


def test_bm25_oracle_random_corpora():
    rng = np.random.default_rng(7)
    for _ in range(20):
        check_bm25(*random_corpus(rng, int(rng.integers(1, 101))))


def test_bm25_postings_and_tokens():
    assert tokenize("Entorhinal-cortex, (EC)_2") == ["entorhinal", "cortex", "ec", "2"]
    index = make_index(["a b a", "b c"])
    assert index.postings("a") == [(0, 2)]
    assert index.bm25.doc_freq["b"] == 2
    assert bm25_search(index, "zzz", 5) == []


# fusion and reranking

def test_rrf_exact():
    rng = random.Random(3)
    ids = [f"d{i}" for i in range(40)]
    for _ in range(100):
        a = rng.sample(ids, rng.randint(0, 20))
        b = rng.sample(ids, rng.randint(0, 20))
        fused = dict(reciprocal_rank_fusion({"bm25": a, "vector": b}))
        for cid, score in fused.items():
            expect = sum(1.0 / (60 + r) for lst in (a, b) for r, x in enumerate(lst, 1) if x == cid)
            assert score == expect
        assert set(fused) == set(a) | set(b)


def test_rrf_order_ties_by_id():
    fused = reciprocal_rank_fusion({"x": ["b", "a"], "y": ["a", "b"]})
    assert [c for c, _ in fused] == ["a", "b"]


def hits_for(n):
    rng = np.random.default_rng(n)
    return [RetrievalHit(DocumentChunk(f"c{i}", "t", "", "", embedding=rng.normal(size=4)), None, None, 0.0)
            for i in range(n)]


class FixedReranker:
    id = "fixed"

    def score(self, query, hits):
        return [float(int(h.chunk.chunk_id[1:]) % 7) for h in hits]


class BrokenReranker:
    id = "broken"

    def score(self, query, hits):
        raise RerankerError("down")


def test_rerank_cardinality():
    rng = random.Random(11)
    for _ in range(100):
        n = rng.randint(0, 20)
        out = rerank(hits_for(n), "q", FixedReranker())
        assert len(out.hits) == min(5, n)
        scores = [h.rerank_score for h in out.hits]
        assert scores == sorted(scores, reverse=True)


def test_rerank_too_many():
    with pytest.raises(ValueError):
        rerank(hits_for(21), "q", FixedReranker())


def test_rerank_fallback():
    out = rerank(hits_for(8), "q", BrokenReranker(), fallback=FixedReranker())
    assert out.fallback_used and len(out.hits) == 5
    with pytest.raises(RerankerError):
        rerank(hits_for(8), "q", BrokenReranker())


def test_hybrid_without_embedder_is_bm25_only():
    docs, query = random_corpus(np.random.default_rng(2), 30)
    index = make_index(docs)
    res = hybrid_search(index, query, None, 20)
    assert res.bm25_only
    assert [h.chunk.chunk_id for h in res.hits] == [s.chunk.chunk_id for s in bm25_search(index, query, 20)]
    both = hybrid_search(index, query, EMB, 20)
    assert not both.bm25_only and len(both.hits) <= 20


# citations

def test_citation_fuzz_no_false_accepts():
    rng = random.Random(5)
    entries = [(f"PMC{1000000 + 37 * i}", f"Tract study number {i} of the {rng.choice(['frontal', 'temporal'])} lobe")
               for i in range(50)]
    index = make_index([t for _, t in entries], [t for _, t in entries], [p for p, _ in entries])
    known = {p: t for p, t in entries}

    def perturb(s):
        i = rng.randrange(len(s))
        op = rng.randrange(3)
        c = rng.choice(string.ascii_letters + string.digits + " ")
        if op == 0:
            return s[:i] + c + s[i + 1:]
        if op == 1:
            return s[:i] + c + s[i:]
        return s[:i] + s[i + 1:]

    cites = []
    while len(cites) < 10_000:
        p, t = rng.choice(entries)
        mode = rng.randrange(3)
        if mode == 0:
            p = perturb(p)
        elif mode == 1:
            t = perturb(t)
        else:
            p, t = perturb(p), rng.choice(entries)[1]
        if known.get(p, "").casefold() != t.casefold():
            cites.append(CitationRecord(t, p))
    verified = verify_citations(cites, index)
    assert sum(c.verified for c in verified) == 0
    assert all(c.verified for c in verify_citations([CitationRecord(t.upper(), p) for p, t in entries], index))


def test_parse_answer_json():
    assert parse_answer_json('```json\n{"connection": "True"}\n```') == {"connection": "True"}
    for bad in ("no json", "{broken", '{"evidence": 1}'):
        with pytest.raises(ParseError):
            parse_answer_json(bad)


def json_reply(connection, pmcid, title, p=0.9):
    from tractprior.gateway import ChatResponse
    body = json.dumps({"connection": connection, "evidence": "quoted", "citations": [{"title": title, "pmcid": pmcid}]})
    return ChatResponse(body, (('{"connection": "', -0.01), (connection, math.log(p)), ('", ...', -0.01)))


def corpus_index():
    docs = [Document("The superior frontal gyrus connects to the caudate via the anterior limb.", "Frontostriatal tracts", "PMC1"),
            Document("The insula has projections to the orbitofrontal cortex.", "Insular connectivity", "PMC2")]
    return ingest(docs, EMB)


def test_grounded_query_verified_and_fabricated():
    parc = toy_parcellation(3)
    index = corpus_index()
    settings = ModelSettings("m")
    ok = grounded_query(index, parc.pair("R0", "R1"), ScriptedBackend([json_reply("True", "PMC1", "Frontostriatal tracts")]),
                        settings, EMB, fallback_reranker=CosineReranker(EMB), retry=RetryPolicy(1, 0.0))
    assert ok.classification is Verdict.TRUE and ok.confidence_connected == pytest.approx(0.9)
    assert [c.verified for c in ok.citations] == [True]
    fake = grounded_query(index, parc.pair("R0", "R1"), ScriptedBackend([json_reply("False", "PMC9999999", "Invented")]),
                          settings, EMB, fallback_reranker=CosineReranker(EMB), retry=RetryPolicy(1, 0.0))
    assert fake.classification is Verdict.FALSE
    assert [c.verified for c in fake.citations] == [False]


def test_grounded_query_corrective_turn():
    from tractprior.connectome import Parcellation
    from tractprior.gateway import ChatResponse
    parc = Parcellation.from_names("named", [("Insula", "Left"), ("LateralOrbitofrontal", "Left")])
    b = ScriptedBackend([ChatResponse("I think so."), json_reply("True", "PMC2", "Insular connectivity")])
    r = grounded_query(corpus_index(), parc.pair("Insula", "LateralOrbitofrontal"), b, ModelSettings("m"), None,
                       fallback_reranker=CosineReranker(EMB), retry=RetryPolicy(1, 0.0))
    assert b.calls == 2 and r.ok and "bm25_only" in r.flags
    b = ScriptedBackend([ChatResponse("nope"), ChatResponse("still nope")])
    r = grounded_query(corpus_index(), parc.pair("Insula", "LateralOrbitofrontal"), b, ModelSettings("m"), None,
                       fallback_reranker=CosineReranker(EMB), retry=RetryPolicy(1, 0.0))
    assert not r.ok and r.error.startswith("parse_failure")


def test_grounded_query_no_context():
    b = ScriptedBackend([])
    r = grounded_query(corpus_index(), toy_parcellation(3).pair("R0", "R1"), b, ModelSettings("m"), None)
    assert not r.ok and r.error == "no context retrieved" and b.calls == 0


def test_index_save_load_roundtrip(tmp_path):
    index = corpus_index()
    index.save(tmp_path / "idx")
    back = CorpusIndex.load(tmp_path / "idx")
    assert back.chunks == index.chunks
    assert np.array_equal(back.embeddings, index.embeddings)
    assert back.bm25 == index.bm25
    q = "insula orbitofrontal"
    assert bm25_search(back, q, 5) == bm25_search(index, q, 5)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_bm25_property(seed):
    rng = np.random.default_rng(seed)
    check_bm25(*random_corpus(rng, int(rng.integers(1, 30))))
