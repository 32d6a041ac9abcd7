"""Text splitting for the literature and parcellation-supplement indexes."""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np

# paragraph, sentence, word; below that, fixed-width character slices
_SEPARATORS = (
    re.compile(r"\n[ \t]*\n\s*"),
    re.compile(r"(?<=[.!?])\s+"),
    re.compile(r"\s+"),
)
_SENTENCE = _SEPARATORS[1]


def _split_after(text: str, pattern: re.Pattern) -> list[str]:
    """Cut after each separator match; the pieces concatenate back to ``text``."""
    pieces, start = [], 0
    for m in pattern.finditer(text):
        if m.end() > start and m.end() < len(text):
            pieces.append(text[start:m.end()])
            start = m.end()
    pieces.append(text[start:])
    return [p for p in pieces if p]


def _merge(pieces: Sequence[str], size: int, overlap: int, level: int) -> list[str]:
    chunks: list[str] = []
    current: list[str] = []
    total = 0
    for piece in pieces:
        if len(piece) > size:
            if current:
                chunks.append("".join(current))
                current, total = [], 0
            chunks.extend(_split(piece, size, overlap, level + 1))
            continue
        if current and total + len(piece) > size:
            chunks.append("".join(current))
            while current and (total > overlap or total + len(piece) > size):
                total -= len(current.pop(0))
        current.append(piece)
        total += len(piece)
    if current:
        chunks.append("".join(current))
    return chunks


def _split(text: str, size: int, overlap: int, level: int) -> list[str]:
    if len(text) <= size:
        return [text]
    if level >= len(_SEPARATORS):
        step = size - overlap
        return [text[i:i + size] for i in range(0, len(text) - overlap, step)]
    pieces = _split_after(text, _SEPARATORS[level])
    if len(pieces) == 1:
        return _split(text, size, overlap, level + 1)
    return _merge(pieces, size, overlap, level)


def recursive_split(text: str, chunk_size: int = 2500, overlap: int = 200) -> list[str]:
    """Split on paragraphs, then sentences, then words, keeping chunks within ``chunk_size``.

    Consecutive chunks share up to ``overlap`` characters of whole pieces.
    """
    if overlap < 0 or chunk_size <= overlap:
        raise ValueError(f"need chunk_size > overlap >= 0, got {chunk_size=} {overlap=}")
    chunks = (c.strip() for c in _split(text, chunk_size, overlap, 0))
    return [c for c in chunks if c]


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _split_after(text, _SENTENCE) if s.strip()]


def semantic_chunks(
    text: str,
    embedder=None,
    threshold: float = 0.8,
    window: int = 5,
    max_chars: int = 2500,
) -> list[str]:
    """Group adjacent sentences into topical chunks.

    With an embedder, a sentence joins the running chunk while its cosine
    similarity to the preceding sentence is at least ``threshold``. Without
    one, chunks are fixed windows of ``window`` sentences.
    """
    sentences = split_sentences(text)
    if not sentences:
        return []
    if embedder is None:
        groups = [sentences[i:i + window] for i in range(0, len(sentences), window)]
    else:
        vecs = np.asarray(embedder.embed(sentences), dtype=float)
        norms = np.linalg.norm(vecs, axis=1)
        groups = [[sentences[0]]]
        length = len(sentences[0])
        for i in range(1, len(sentences)):
            denom = norms[i - 1] * norms[i]
            sim = float(vecs[i - 1] @ vecs[i] / denom) if denom > 0 else 0.0
            if sim >= threshold and length + 1 + len(sentences[i]) <= max_chars:
                groups[-1].append(sentences[i])
                length += 1 + len(sentences[i])
            else:
                groups.append([sentences[i]])
                length = len(sentences[i])
    out = []
    for g in groups:
        joined = " ".join(g)
        out.extend(recursive_split(joined, max_chars, 0) if len(joined) > max_chars else [joined])
    return out
