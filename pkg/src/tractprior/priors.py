"""Per-record confidences and their aggregation into an edge-prior matrix."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .connectome import (
    Connectome,
    ConnectomeError,
    ConnectomeKind,
    Parcellation,
    RegionPair,
    read_matrix_csv,
    write_matrix_csv,
)
from .gateway import ChatResponse, Usage, canonical_json
from .prompts import Ordering, PromptStrategy, Verdict

NO_LOGPROBS = "no_logprobs"


class PriorError(ValueError):
    pass


class VerdictTokenError(PriorError):
    """Log-probabilities were returned but the verdict token is not among them."""


@dataclass(frozen=True)
class CitationRecord:
    title: str
    pmcid: str
    quote: str = ""
    verified: bool = False

    def to_dict(self) -> dict:
        return {"title": self.title, "pmcid": self.pmcid, "quote": self.quote, "verified": self.verified}

    @classmethod
    def from_dict(cls, d: dict) -> "CitationRecord":
        return cls(str(d.get("title", "")), str(d.get("pmcid", "")), str(d.get("quote", "")), bool(d.get("verified", False)))


@dataclass(frozen=True)
class Confidence:
    confidence_connected: float
    verdict_token_logprob: float | None
    abstained: bool = False
    flags: tuple[str, ...] = ()


_VERDICT_WORDS = {Verdict.TRUE: "true", Verdict.FALSE: "false"}


def _normalise_token(token: str) -> str:
    return token.strip().strip("\"'`.,:;!*()[]{}").lower()


def find_verdict_token(token_logprobs: Sequence[tuple[str, float]], verdict: Verdict, which: str = "last") -> float:
    word = _VERDICT_WORDS[verdict]
    idx = range(len(token_logprobs) - 1, -1, -1) if which == "last" else range(len(token_logprobs))
    for i in idx:
        tok, lp = token_logprobs[i]
        if _normalise_token(tok) == word:
            return lp
    raise VerdictTokenError(f"verdict token {word!r} not found in the returned log-probabilities")


def confidence_from_response(resp: ChatResponse, cls: Verdict, which: str = "last") -> Confidence:
    """Probability that the pair is connected, from the verdict token's log-probability.

    ``which`` picks the first or last matching token; JSON answers put the
    verdict first, free-text answers put it last.
    """
    if cls is Verdict.DONT_KNOW:
        return Confidence(0.0, None, abstained=True)
    if resp.token_logprobs is None:
        return Confidence(1.0 if cls is Verdict.TRUE else 0.0, None, flags=(NO_LOGPROBS,))
    lp = find_verdict_token(resp.token_logprobs, cls, which)
    p = math.exp(lp)
    return Confidence(p if cls is Verdict.TRUE else 1.0 - p, lp)


@dataclass(frozen=True)
class PriorRecord:
    pair: RegionPair
    ordering: Ordering
    repeat: int
    strategy: PromptStrategy
    classification: Verdict | None
    confidence_connected: float
    verdict_token_logprob: float | None = None
    abstained: bool = False
    reasoning_text: str | None = None
    citations: tuple[CitationRecord, ...] | None = None
    raw_response_digest: str = ""
    parcellation_id: str = ""
    model_id: str = ""
    usage: Usage = Usage()
    flags: tuple[str, ...] = ()
    error: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence_connected <= 1.0:
            raise PriorError(f"confidence {self.confidence_connected} outside [0, 1]")
        if self.abstained and (self.classification is not Verdict.DONT_KNOW or self.confidence_connected != 0.0):
            raise PriorError("abstained records must be DontKnow with confidence 0")
        if self.verdict_token_logprob is not None and self.verdict_token_logprob > 0:
            raise PriorError("log-probabilities must be <= 0")

    @property
    def ok(self) -> bool:
        return self.error is None and self.classification is not None

    @property
    def key(self) -> tuple:
        return (*self.pair.key, self.ordering.value, self.repeat)

    @property
    def predicts_connected(self) -> bool:
        return self.classification is Verdict.TRUE

    @property
    def verdict_confidence(self) -> float | None:
        """Confidence in the record's own verdict; None for abstentions and hard 0/1 fallbacks."""
        if not self.ok or self.abstained or NO_LOGPROBS in self.flags:
            return None
        if self.classification is Verdict.TRUE:
            return self.confidence_connected
        return 1.0 - self.confidence_connected

    def to_dict(self) -> dict:
        return {
            "pair": [self.pair.a.name, self.pair.b.name],
            "ordering": self.ordering.value,
            "repeat": self.repeat,
            "strategy": self.strategy.label,
            "classification": None if self.classification is None else self.classification.value,
            "verdict_token_logprob": self.verdict_token_logprob,
            "confidence_connected": self.confidence_connected,
            "abstained": self.abstained,
            "reasoning_text": self.reasoning_text,
            "citations": None if self.citations is None else [c.to_dict() for c in self.citations],
            "raw_response_digest": self.raw_response_digest,
            "parcellation_id": self.parcellation_id,
            "model_id": self.model_id,
            "usage": {"input_tokens": self.usage.input_tokens, "output_tokens": self.usage.output_tokens},
            "flags": list(self.flags),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict, parcellation: Parcellation) -> "PriorRecord":
        a, b = d["pair"]
        u = d.get("usage") or {}
        cits = d.get("citations")
        return cls(
            pair=parcellation.pair(a, b),
            ordering=Ordering(d["ordering"]),
            repeat=int(d["repeat"]),
            strategy=PromptStrategy.parse(d["strategy"]),
            classification=None if d.get("classification") is None else Verdict(d["classification"]),
            confidence_connected=float(d["confidence_connected"]),
            verdict_token_logprob=d.get("verdict_token_logprob"),
            abstained=bool(d.get("abstained", False)),
            reasoning_text=d.get("reasoning_text"),
            citations=None if cits is None else tuple(CitationRecord.from_dict(c) for c in cits),
            raw_response_digest=d.get("raw_response_digest", ""),
            parcellation_id=d.get("parcellation_id", ""),
            model_id=d.get("model_id", ""),
            usage=Usage(int(u.get("input_tokens", 0)), int(u.get("output_tokens", 0))),
            flags=tuple(d.get("flags") or ()),
            error=d.get("error"),
        )


def failed_record(pair, ordering, repeat, strategy, error: str, **kw) -> PriorRecord:
    return PriorRecord(pair, Ordering(ordering), repeat, strategy, None, 0.0, error=error, **kw)


def sort_records(records: Iterable[PriorRecord]) -> list[PriorRecord]:
    return sorted(records, key=lambda r: r.key)


def write_records(path: str | Path, records: Iterable[PriorRecord]) -> None:
    lines = [canonical_json(r.to_dict()) for r in sort_records(records)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def append_record(fh, record: PriorRecord) -> None:
    fh.write(canonical_json(record.to_dict()) + "\n")
    fh.flush()


def read_records(path: str | Path, parcellation: Parcellation) -> list[PriorRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(PriorRecord.from_dict(json.loads(line), parcellation))
    return out


@dataclass(frozen=True, eq=False)
class PriorMatrix:
    """Mean connection confidence per pair. Unrecorded pairs are unobserved, not zero."""

    parcellation: Parcellation
    values: np.ndarray
    counts: np.ndarray
    strategy: PromptStrategy | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0

    @property
    def connectome(self) -> Connectome:
        return Connectome(self.parcellation, np.where(self.observed, self.values, 0.0), ConnectomeKind.PRIOR_CONFIDENCE)

    def value(self, a: str, b: str) -> float | None:
        i, j = self.parcellation.region(a).index, self.parcellation.region(b).index
        return float(self.values[i, j]) if self.counts[i, j] else None

    def missing(self, pairs: Sequence[RegionPair]) -> list[RegionPair]:
        return [p for p in pairs if not self.counts[p.a.index, p.b.index]]


def aggregate(records: Sequence[PriorRecord], parcellation: Parcellation) -> PriorMatrix:
    """Arithmetic mean of confidence_connected per canonical pair over orderings and repeats."""
    usable = [r for r in records if r.ok]
    strategies = {r.strategy for r in usable}
    if len(strategies) > 1:
        raise PriorError(f"records mix prompting strategies: {sorted(s.label for s in strategies)}")
    parcs = {r.parcellation_id for r in usable if r.parcellation_id}
    if len(parcs) > 1 or (parcs and parcs != {parcellation.id}):
        raise PriorError(f"records belong to parcellations {sorted(parcs)}, expected {parcellation.id!r}")
    groups: dict[tuple[int, int], list[float]] = {}
    for r in usable:
        if r.pair.a.name not in parcellation or r.pair.b.name not in parcellation:
            raise PriorError(f"record pair {r.pair} not in parcellation {parcellation.id!r}")
        i, j = sorted((parcellation.region(r.pair.a.name).index, parcellation.region(r.pair.b.name).index))
        groups.setdefault((i, j), []).append(r.confidence_connected)
    n = len(parcellation)
    values = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=int)
    for (i, j), vals in groups.items():
        # fsum is correctly rounded, so the mean does not depend on record order
        m = math.fsum(vals) / len(vals)
        values[i, j] = values[j, i] = m
        counts[i, j] = counts[j, i] = len(vals)
    provenance = {
        "strategy": next(iter(strategies)).label if strategies else None,
        "model_ids": sorted({r.model_id for r in usable}),
        "orderings": sorted({r.ordering.value for r in usable}),
        "repeats": sorted({r.repeat for r in usable}),
        "n_records": len(usable),
        "n_failed": len(records) - len(usable),
        "record_digests": [r.raw_response_digest for r in sort_records(usable)],
    }
    return PriorMatrix(parcellation, values, counts, next(iter(strategies)) if strategies else None, provenance)


def classify(matrix: PriorMatrix, cutoff: float = 0.5) -> Connectome:
    """Binary edges for observed pairs whose mean confidence reaches the cutoff."""
    edges = matrix.observed & (matrix.values >= cutoff)
    np.fill_diagonal(edges, False)
    return Connectome(matrix.parcellation, edges.astype(float), ConnectomeKind.BINARY)


def save_prior_matrix(matrix: PriorMatrix, path: str | Path) -> None:
    cells = []
    for i in range(len(matrix.parcellation)):
        row = []
        for j in range(len(matrix.parcellation)):
            if i == j:
                row.append("0")
            elif matrix.counts[i, j]:
                row.append(repr(float(matrix.values[i, j])))
            else:
                row.append("")
        cells.append(row)
    write_matrix_csv(path, matrix.parcellation.names, cells)


def load_prior_matrix(path: str | Path, parcellation: Parcellation) -> PriorMatrix:
    names, cells = read_matrix_csv(path)
    if names != parcellation.names:
        raise ConnectomeError(f"{path}: region labels do not match parcellation {parcellation.id!r}")
    n = len(names)
    values = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=int)
    for i, row in enumerate(cells):
        for j, v in enumerate(row):
            if i != j and v != "":
                values[i, j] = float(v)
                counts[i, j] = 1
    if not np.array_equal(values, values.T) or not np.array_equal(counts, counts.T):
        raise ConnectomeError(f"{path}: prior matrix is not symmetric")
    if np.any((values < 0) | (values > 1)):
        raise ConnectomeError(f"{path}: prior values outside [0, 1]")
    return PriorMatrix(parcellation, values, counts)

