"""Chunk index with BM25 keyword search and exact cosine search, fused by rank."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from ..gateway import canonical_json
from .chunking import recursive_split

RRF_K = 60
_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


class RetrievalError(RuntimeError):
    pass


class EmbedderError(RetrievalError):
    pass


class RerankerError(RetrievalError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; no stemming, so region names stay intact."""
    return _TOKEN.findall(text.lower())


class Embedder(Protocol):
    id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic hashed bag-of-words vectors, L2-normalised."""

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.id = f"hashing-bow-{dim}"

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok, n in Counter(tokenize(text)).items():
                out[i, self._bucket(tok)] += n
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


class HttpEmbedder:
    """Embedding endpoint taking ``{model, texts, input_type}`` and returning ``{embeddings}``."""

    def __init__(self, endpoint: str, model: str, api_key_env: str, input_type: str = "search_document",
                 client: httpx.Client | None = None, timeout: float = 60.0):
        self.endpoint, self.model, self.input_type = endpoint, model, input_type
        self.id = f"http:{model}"
        self._token = os.environ.get(api_key_env, "")
        if not self._token:
            raise EmbedderError(f"environment variable {api_key_env} is not set")
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        try:
            resp = self._client.post(
                self.endpoint,
                json={"model": self.model, "texts": list(texts), "input_type": self.input_type},
                headers={"Authorization": f"Bearer {self._token}"},
            )
            resp.raise_for_status()
            vecs = np.asarray(resp.json()["embeddings"], dtype=float)
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise EmbedderError(str(exc)) from exc
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        return np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)


@dataclass(frozen=True)
class Document:
    text: str
    title: str
    pmcid: str
    keywords: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "Document":
        return cls(d["text"], d.get("title", ""), d.get("pmcid", ""), tuple(d.get("keywords") or ()))


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    text: str
    title: str
    pmcid: str
    keywords: tuple[str, ...] = ()
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "text": self.text, "title": self.title, "pmcid": self.pmcid,
                "keywords": list(self.keywords)}


@dataclass(frozen=True)
class BM25Stats:
    k1: float
    b: float
    doc_lengths: tuple[int, ...]
    doc_freq: Mapping[str, int]
    avgdl: float

    @classmethod
    def build(cls, token_lists: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75) -> "BM25Stats":
        df: Counter = Counter()
        for toks in token_lists:
            df.update(set(toks))
        lengths = tuple(len(t) for t in token_lists)
        avgdl = sum(lengths) / len(lengths) if lengths else 0.0
        return cls(k1, b, lengths, dict(sorted(df.items())), avgdl)

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def to_dict(self) -> dict:
        return {"k1": self.k1, "b": self.b, "avgdl": self.avgdl, "doc_lengths": list(self.doc_lengths),
                "doc_freq": dict(self.doc_freq)}


class CorpusIndex:
    """Immutable after construction; safe to query from several threads."""

    def __init__(self, chunks: Sequence[DocumentChunk], embeddings: np.ndarray, embedder_id: str,
                 k1: float = 1.2, b: float = 0.75):
        if not chunks:
            raise RetrievalError("index needs at least one chunk")
        embeddings = np.asarray(embeddings, dtype=float)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(chunks):
            raise RetrievalError("one embedding row per chunk is required")
        embeddings.setflags(write=False)
        self.chunks = tuple(replace(c, embedding=embeddings[i]) for i, c in enumerate(chunks))
        self.embeddings = embeddings
        self.embedder_id = embedder_id
        tokens = [tokenize(c.text) for c in self.chunks]
        self.bm25 = BM25Stats.build(tokens, k1, b)
        self._postings: dict[str, list[tuple[int, int]]] = {}
        for i, toks in enumerate(tokens):
            for term, tf in sorted(Counter(toks).items()):
                self._postings.setdefault(term, []).append((i, tf))
        self._by_id = {c.chunk_id: i for i, c in enumerate(self.chunks)}
        if len(self._by_id) != len(self.chunks):
            raise RetrievalError("duplicate chunk ids")
        self.titles: dict[str, str] = {}
        for c in self.chunks:
            if c.pmcid:
                self.titles.setdefault(c.pmcid, c.title)

    def __len__(self):
        return len(self.chunks)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def chunk(self, chunk_id: str) -> DocumentChunk:
        return self.chunks[self._by_id[chunk_id]]

    def postings(self, term: str) -> list[tuple[int, int]]:
        return self._postings.get(term, [])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "chunks.jsonl").write_text("".join(canonical_json(c.to_dict()) + "\n" for c in self.chunks), encoding="utf-8")
        (d / "bm25.json").write_text(canonical_json(self.bm25.to_dict()) + "\n", encoding="utf-8")
        (d / "meta.json").write_text(canonical_json({"embedder_id": self.embedder_id, "dim": self.dim,
                                                     "n_chunks": len(self)}) + "\n", encoding="utf-8")
        with open(d / "embeddings.npy", "wb") as fh:
            np.save(fh, np.ascontiguousarray(self.embeddings), allow_pickle=False)

    @classmethod
    def load(cls, directory: str | Path) -> "CorpusIndex":
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
            stored = json.loads((d / "bm25.json").read_text(encoding="utf-8"))
            chunks = []
            for line in (d / "chunks.jsonl").read_text(encoding="utf-8").splitlines():
                if line.strip():
                    c = json.loads(line)
                    chunks.append(DocumentChunk(c["chunk_id"], c["text"], c["title"], c["pmcid"], tuple(c["keywords"])))
            emb = np.load(d / "embeddings.npy", allow_pickle=False)
        except (OSError, KeyError, ValueError) as exc:
            raise RetrievalError(f"cannot load index from {d}: {exc}") from None
        index = cls(chunks, emb, meta["embedder_id"], stored["k1"], stored["b"])
        if index.bm25.to_dict() != stored:
            raise RetrievalError(f"{d}: stored BM25 statistics do not match the chunks")
        return index


def chunk_document(doc: Document, doc_no: int, chunk_size: int, overlap: int) -> list[DocumentChunk]:
    stem = doc.pmcid or f"doc{doc_no:05d}"
    return [
        DocumentChunk(f"{stem}:{i:04d}", text, doc.title, doc.pmcid, doc.keywords)
        for i, text in enumerate(recursive_split(doc.text, chunk_size, overlap))
    ]


def ingest(documents: Sequence[Document], embedder: Embedder, chunk_size: int = 2500, overlap: int = 200,
           k1: float = 1.2, b: float = 0.75) -> CorpusIndex:
    if overlap < 0 or chunk_size <= overlap:
        raise ValueError(f"need chunk_size > overlap >= 0, got {chunk_size=} {overlap=}")
    if not documents:
        raise RetrievalError("empty corpus")
    chunks = []
    for n, doc in enumerate(documents):
        chunks.extend(chunk_document(doc, n, chunk_size, overlap))
    if not chunks:
        raise RetrievalError("corpus produced no text chunks")
    return index_chunks(chunks, embedder, k1, b)


def index_chunks(chunks: Sequence[DocumentChunk], embedder: Embedder, k1: float = 1.2, b: float = 0.75) -> CorpusIndex:
    try:
        emb = embedder.embed([c.text for c in chunks])
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"embedder {getattr(embedder, 'id', '?')} failed: {exc}") from exc
    return CorpusIndex(chunks, emb, embedder.id, k1, b)


def load_corpus_dir(directory: str | Path) -> list[Document]:
    """Read ``*.json`` documents ``{pmcid, title, keywords[], text}`` in filename order."""
    docs = []
    for path in sorted(Path(directory).glob("*.json")):
        try:
            docs.append(Document.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        except (KeyError, ValueError) as exc:
            raise RetrievalError(f"{path}: {exc}") from None
    return docs


@dataclass(frozen=True)
class ScoredChunk:
    chunk: DocumentChunk
    score: float
    rank: int


def bm25_search(index: CorpusIndex, query: str, k: int) -> list[ScoredChunk]:
    """Chunks with nonzero BM25 score, best first, ties by chunk id."""
    stats = index.bm25
    scores: dict[int, float] = {}
    for term in tokenize(query):
        postings = index.postings(term)
        if not postings:
            continue
        idf = stats.idf(term)
        for i, tf in postings:
            norm = stats.k1 * (1 - stats.b + stats.b * stats.doc_lengths[i] / stats.avgdl)
            scores[i] = scores.get(i, 0.0) + idf * tf * (stats.k1 + 1) / (tf + norm)
    ranked = sorted(((s, index.chunks[i].chunk_id, i) for i, s in scores.items() if s > 0),
                    key=lambda x: (-x[0], x[1]))[:k]
    return [ScoredChunk(index.chunks[i], s, r) for r, (s, _, i) in enumerate(ranked, 1)]


def vector_search(index: CorpusIndex, query_vec: np.ndarray, k: int) -> list[ScoredChunk]:
    sims = index.embeddings @ np.asarray(query_vec, dtype=float)
    ranked = sorted(range(len(index)), key=lambda i: (-sims[i], index.chunks[i].chunk_id))[:k]
    return [ScoredChunk(index.chunks[i], float(sims[i]), r) for r, i in enumerate(ranked, 1)]


def reciprocal_rank_fusion(rankings: Mapping[str, Sequence[str]], k: int = RRF_K) -> list[tuple[str, float]]:
    """Fuse ranked id lists by summing 1/(k + rank); ties broken by id."""
    scores: dict[str, float] = {}
    for ids in rankings.values():
        for rank, cid in enumerate(ids, 1):
            scores[cid] = scores.get(cid, 0.0) + 1.0 / (k + rank)
    return sorted(scores.items(), key=lambda x: (-x[1], x[0]))


@dataclass(frozen=True)
class RetrievalHit:
    chunk: DocumentChunk
    bm25_rank: int | None
    vector_rank: int | None
    fused_score: float
    rerank_score: float | None = None


@dataclass(frozen=True)
class HybridResult:
    hits: tuple[RetrievalHit, ...]
    bm25_only: bool = False


def hybrid_search(index: CorpusIndex, query: str, embedder: Embedder | None, k_candidates: int = 20,
                  rrf_k: int = RRF_K) -> HybridResult:
    keyword = bm25_search(index, query, k_candidates)
    vector: list[ScoredChunk] = []
    bm25_only = embedder is None
    if embedder is not None:
        try:
            qv = embedder.embed([query])[0]
            vector = vector_search(index, qv, k_candidates)
        except Exception:
            bm25_only = True
    bm25_rank = {s.chunk.chunk_id: s.rank for s in keyword}
    vec_rank = {s.chunk.chunk_id: s.rank for s in vector}
    fused = reciprocal_rank_fusion({"bm25": [s.chunk.chunk_id for s in keyword],
                                    "vector": [s.chunk.chunk_id for s in vector]}, rrf_k)[:k_candidates]
    hits = tuple(RetrievalHit(index.chunk(cid), bm25_rank.get(cid), vec_rank.get(cid), score) for cid, score in fused)
    return HybridResult(hits, bm25_only)


class Reranker(Protocol):
    id: str

    def score(self, query: str, hits: Sequence[RetrievalHit]) -> list[float]: ...


class CosineReranker:
    """Query-to-chunk cosine similarity over stored embeddings."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder
        self.id = f"cosine:{embedder.id}"

    def score(self, query: str, hits: Sequence[RetrievalHit]) -> list[float]:
        qv = self.embedder.embed([query])[0]
        return [float(h.chunk.embedding @ qv) if h.chunk.embedding is not None else 0.0 for h in hits]


class HttpReranker:
    """Rerank endpoint taking ``{model, query, documents}`` and returning ``{results: [{index, relevance_score}]}``."""

    def __init__(self, endpoint: str, model: str, api_key_env: str, client: httpx.Client | None = None,
                 timeout: float = 60.0):
        self.endpoint, self.model = endpoint, model
        self.id = f"http:{model}"
        self._token = os.environ.get(api_key_env, "")
        if not self._token:
            raise RerankerError(f"environment variable {api_key_env} is not set")
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, query: str, hits: Sequence[RetrievalHit]) -> list[float]:
        try:
            resp = self._client.post(
                self.endpoint,
                json={"model": self.model, "query": query, "documents": [h.chunk.text for h in hits]},
                headers={"Authorization": f"Bearer {self._token}"},
            )
            resp.raise_for_status()
            scores = [0.0] * len(hits)
            for r in resp.json()["results"]:
                scores[int(r["index"])] = float(r["relevance_score"])
        except (httpx.HTTPError, KeyError, ValueError, IndexError) as exc:
            raise RerankerError(str(exc)) from exc
        return scores


@dataclass(frozen=True)
class RerankResult:
    hits: tuple[RetrievalHit, ...]
    fallback_used: bool = False


def rerank(hits: Sequence[RetrievalHit], query: str, reranker: Reranker | None, fallback: Reranker | None = None,
           top_n: int = 5) -> RerankResult:
    """Score candidates, sort descending (ties by chunk id) and keep ``top_n``."""
    if len(hits) > 20:
        raise ValueError("rerank takes at most 20 candidates")
    if not hits:
        return RerankResult(())
    used_fallback = False
    scores = None
    if reranker is not None:
        try:
            scores = reranker.score(query, hits)
        except Exception:
            if fallback is None:
                raise
            used_fallback = True
    if scores is None:
        if fallback is None:
            raise RerankerError("no reranker available")
        scores = fallback.score(query, hits)
        used_fallback = used_fallback or reranker is not None
    scored = [replace(h, rerank_score=float(s)) for h, s in zip(hits, scores)]
    scored.sort(key=lambda h: (-h.rerank_score, h.chunk.chunk_id))
    return RerankResult(tuple(scored[:top_n]), used_fallback)
