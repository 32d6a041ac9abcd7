"""Bounded-concurrency fan-out of connection queries over region pairs.

Every (pair, ordering, repeat) runs in its own session. Finished records are
appended to a JSON-lines cache as they complete, so an interrupted batch
resumes without re-querying.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .connectome import Parcellation, RegionPair
from .gateway import Backend, GatewayError, ModelSettings, RetryPolicy, converse
from .priors import (
    PriorError,
    PriorRecord,
    append_record,
    confidence_from_response,
    failed_record,
    read_records,
    sort_records,
    write_records,
)
from .prompts import (
    DEFAULT_TEMPLATES,
    Ordering,
    ParseError,
    PromptStrategy,
    Templates,
    parse_classification,
    render,
)

log = logging.getLogger(__name__)

SystemContext = Callable[[RegionPair, Ordering], "str | None"]


class BatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BatchPlan:
    parcellation: Parcellation
    pairs: tuple[RegionPair, ...]
    strategy: PromptStrategy
    settings: ModelSettings
    orderings: frozenset[Ordering] = frozenset({Ordering.FORWARD, Ordering.REVERSE})
    repeats_per_ordering: int = 1
    concurrency_limit: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        if self.repeats_per_ordering < 1:
            raise ValueError("repeats_per_ordering must be >= 1")
        if not self.orderings:
            raise ValueError("at least one ordering is required")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "orderings", frozenset(Ordering(o) for o in self.orderings))

    def jobs(self) -> list[tuple[RegionPair, Ordering, int]]:
        orderings = [o for o in Ordering if o in self.orderings]
        return [(p, o, k) for p in self.pairs for o in orderings for k in range(self.repeats_per_ordering)]


def query_pair(
    pair: RegionPair,
    ordering: Ordering,
    repeat: int,
    strategy: PromptStrategy,
    backend: Backend,
    settings: ModelSettings,
    retry: RetryPolicy = RetryPolicy(),
    system_context: str | None = None,
    templates: Templates = DEFAULT_TEMPLATES,
    parcellation_id: str = "",
) -> PriorRecord:
    seq = render(strategy, pair, ordering, system_context, templates)
    conv = converse(seq, backend, settings, sample_index=repeat, retry=retry)
    common = dict(
        raw_response_digest=conv.digest,
        parcellation_id=parcellation_id,
        model_id=settings.model_id,
        usage=conv.usage,
    )
    reasoning = "\n\n".join(r.text for r in conv.responses[:-1]) or None
    try:
        cls = parse_classification(conv.final.text, upv=strategy.uncertainty)
        conf = confidence_from_response(conv.final, cls)
    except (ParseError, PriorError) as exc:
        return failed_record(pair, ordering, repeat, strategy, f"{type(exc).__name__}: {exc}", reasoning_text=reasoning, **common)
    return PriorRecord(
        pair=pair,
        ordering=ordering,
        repeat=repeat,
        strategy=strategy,
        classification=cls,
        confidence_connected=conf.confidence_connected,
        verdict_token_logprob=conf.verdict_token_logprob,
        abstained=conf.abstained,
        reasoning_text=reasoning,
        flags=conf.flags,
        **common,
    )


def run_batch(
    plan: BatchPlan,
    backend: Backend,
    cache_path: str | Path | None = None,
    system_context: SystemContext | None = None,
    templates: Templates = DEFAULT_TEMPLATES,
) -> list[PriorRecord]:
    """One record per (pair, ordering, repeat), in canonical order."""
    done: dict[tuple, PriorRecord] = {}
    if cache_path is not None and Path(cache_path).exists():
        for r in read_records(cache_path, plan.parcellation):
            if r.ok and r.strategy == plan.strategy and r.model_id == plan.settings.model_id:
                done[r.key] = r
    todo = []
    for pair, ordering, repeat in plan.jobs():
        key = (*pair.key, ordering.value, repeat)
        if key not in done:
            todo.append((pair, ordering, repeat))
    log.info("batch: %d jobs, %d cached, %d to run", len(plan.jobs()), len(plan.jobs()) - len(todo), len(todo))

    lock = threading.Lock()
    fh = open(cache_path, "a", encoding="utf-8") if cache_path is not None and todo else None

    def work(job):
        pair, ordering, repeat = job
        ctx = system_context(pair, ordering) if system_context else None
        try:
            rec = query_pair(
                pair, ordering, repeat, plan.strategy, backend, plan.settings, plan.retry, ctx, templates, plan.parcellation.id
            )
        except GatewayError as exc:
            rec = failed_record(
                pair, ordering, repeat, plan.strategy, f"{type(exc).__name__}: {exc}",
                parcellation_id=plan.parcellation.id, model_id=plan.settings.model_id,
            )
        if fh is not None:
            with lock:
                append_record(fh, rec)
        return rec

    try:
        with ThreadPoolExecutor(max_workers=plan.concurrency_limit) as pool:
            fresh = list(pool.map(work, todo))
    finally:
        if fh is not None:
            fh.close()

    records = sort_records([*done.values(), *fresh])
    if cache_path is not None:
        write_records(cache_path, records)
    if fresh and not any(r.ok for r in fresh) and not done:
        raise BatchError(f"all {len(fresh)} queries failed; first error: {fresh[0].error}")
    return records


def select_pairs(parcellation: Parcellation, names: Sequence[tuple[str, str]]) -> list[RegionPair]:
    return [parcellation.pair(a, b).canonical() for a, b in names]
