"""Literature retrieval and citation-grounded queries."""

from .chunking import recursive_split, semantic_chunks, split_sentences
from .grounding import (
    RAG_STRATEGY,
    RegionContext,
    RegionContextProvider,
    combine_contexts,
    grounded_query,
    parse_answer_json,
    region_context,
    verify_citations,
)
from .index import (
    RRF_K,
    BM25Stats,
    CorpusIndex,
    CosineReranker,
    Document,
    DocumentChunk,
    EmbedderError,
    HashingEmbedder,
    HttpEmbedder,
    HttpReranker,
    HybridResult,
    RerankerError,
    RetrievalError,
    RetrievalHit,
    bm25_search,
    hybrid_search,
    index_chunks,
    ingest,
    load_corpus_dir,
    reciprocal_rank_fusion,
    rerank,
    tokenize,
    vector_search,
)

__all__ = [
    "BM25Stats",
    "CorpusIndex",
    "CosineReranker",
    "Document",
    "DocumentChunk",
    "EmbedderError",
    "HashingEmbedder",
    "HttpEmbedder",
    "HttpReranker",
    "HybridResult",
    "RAG_STRATEGY",
    "RRF_K",
    "RegionContext",
    "RegionContextProvider",
    "RerankerError",
    "RetrievalError",
    "RetrievalHit",
    "bm25_search",
    "combine_contexts",
    "grounded_query",
    "hybrid_search",
    "index_chunks",
    "ingest",
    "load_corpus_dir",
    "parse_answer_json",
    "reciprocal_rank_fusion",
    "recursive_split",
    "region_context",
    "rerank",
    "semantic_chunks",
    "split_sentences",
    "tokenize",
    "vector_search",
    "verify_citations",
]
