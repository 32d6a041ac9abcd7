"""Command-line entry point.

    tractprior <command> --config run.toml [--out DIR] [--replay STORE] [--record STORE] [--seed N]

Commands: priors, evaluate, ingest, ground, filter, ndm, permute. Each writes
its outputs under the run directory with fixed names plus a manifest.json.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .batch import BatchError, BatchPlan, run_batch
from .config import RunConfig, load_config
from .connectome import (
    ConnectomeError,
    ConnectomeKind,
    Parcellation,
    binarize,
    connectome_from_endpoints,
    enumerate_pairs,
    load_connectome,
    load_endpoints,
    load_parcellation,
    save_connectome,
)
from .evaluation import (
    EvaluationError,
    EvaluationSet,
    build_eval_set,
    confidence_separation,
    cost_report,
    disagreement_report,
    format_mean_std,
    load_price_table,
    markdown_table,
    outcome_class,
    score_run,
    stability_report,
)
from .filtering import augment_filter, load_outcome, save_provenance
from .gateway import (
    Backend,
    ConfigError,
    GatewayError,
    HttpBackend,
    ModelSettings,
    ReplayBackend,
    ReplayStore,
    RetryPolicy,
    record_session,
)
from .ndm import NDMError, default_t_grid, fit, load_target, permutation_test
from .priors import (
    NO_LOGPROBS,
    PriorError,
    PriorRecord,
    aggregate,
    append_record,
    load_prior_matrix,
    read_records,
    save_prior_matrix,
    sort_records,
    write_records,
)
from .prompts import Ordering, PromptError
from .rag import (
    CorpusIndex,
    CosineReranker,
    EmbedderError,
    HashingEmbedder,
    HttpEmbedder,
    HttpReranker,
    RAG_STRATEGY,
    RegionContextProvider,
    RerankerError,
    RetrievalError,
    grounded_query,
    ingest,
    load_corpus_dir,
)

log = logging.getLogger("tractprior")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_BATCH = 5

RECORDS = "records.jsonl"
PRIORS = "priors.csv"
MANIFEST = "manifest.json"
SCORES = "scores.json"
FIT = "fit.json"
NULL = "null.csv"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(f.relative_to(p).as_posix().encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


class Run:
    """One command invocation with its resolved config and the manifest being built."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config_path = Path(args.config)
        self.cfg: RunConfig = load_config(self.config_path)
        out = args.out or self.cfg.run.out
        if out is None:
            raise ConfigError("no output directory: set run.out or pass --out")
        self.out = Path(out)
        self.seed = self.cfg.run.seed if args.seed is None else args.seed
        self.replay = args.replay or (self.cfg.model.replay if self.cfg.model else None)
        self.record = args.record or (self.cfg.model.record if self.cfg.model else None)
        self.inputs: dict[str, dict] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.out.mkdir(parents=True, exist_ok=True)

    def input(self, role: str, path: str | Path | None, required: bool = True) -> Path | None:
        if path is None:
            if required:
                raise ConfigError(f"{self.command}: missing input '{role}'")
            return None
        p = Path(path)
        if not p.exists():
            if required:
                raise ConfigError(f"{self.command}: input '{role}' not found: {p}")
            return None
        self.inputs[role] = {"file": p.name, "sha256": file_digest(p)}
        return p

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def parcellation(self) -> Parcellation:
        return load_parcellation(self.input("parcellation", self.cfg.run.parcellation))

    def write_manifest(self) -> None:
        outputs = {}
        for name in sorted(self.outputs):
            p = self.out / name
            if not p.exists():
                raise RuntimeError(f"expected output {name} was not written")
            outputs[name] = file_digest(p)
        entry = {
            "version": __version__,
            "config": {"file": self.config_path.name, "sha256": file_digest(self.config_path)},
            "overrides": {"seed": self.seed, "replay": self.replay is not None, "record": self.record is not None},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            **self.extra,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        # commands sharing a run directory each keep their own entry
        path = self.out / MANIFEST
        manifest = {"tool": "tractprior", "commands": {}}
        if path.exists():
            try:
                manifest = json.loads(path.read_text(encoding="utf-8"))
            except ValueError:
                log.warning("replacing unreadable %s", path)
        manifest.setdefault("commands", {})[self.command] = entry
        manifest["commands"] = dict(sorted(manifest["commands"].items()))
        path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n", encoding="utf-8")


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def build_backend(run: Run) -> tuple[Backend, ModelSettings, RetryPolicy]:
    m = run.cfg.model
    if m is None:
        raise ConfigError("a [model] section is required")
    settings = ModelSettings(m.model_id, m.temperature, m.logprobs, m.max_output_tokens)
    retry = RetryPolicy(m.max_attempts, m.backoff_base)
    if run.replay is not None and run.record is None:
        store = run.input("replay_store", run.replay)
        return ReplayBackend(ReplayStore(store)), settings, retry
    if not m.endpoint:
        raise ConfigError("model.endpoint is required without a replay store")
    live = HttpBackend(m.endpoint, m.api_key_env, m.timeout)
    if run.record is not None:
        return record_session(live, run.record), settings, retry
    return live, settings, retry


def eval_set_for(run: Run, parc: Parcellation, required: bool) -> EvaluationSet | None:
    ev = run.cfg.evaluation
    if ev.eval_set is not None:
        return EvaluationSet.load(run.input("eval_set", ev.eval_set), parc)
    if ev.atlas is not None:
        atlas = connectome_from_endpoints(load_endpoints(run.input("atlas", ev.atlas)), parc)
        es = build_eval_set(atlas, ev.n_positive, ev.n_negative, run.seed, run.cfg.priors.scope)
        return EvaluationSet(es.positives, es.negatives, es.rng_seed, es.parcellation_id, run.inputs["atlas"]["file"])
    if required:
        raise ConfigError("evaluation needs evaluation.eval_set or evaluation.atlas")
    return None


def pairs_for(run: Run, parc: Parcellation):
    es = eval_set_for(run, parc, required=False)
    if es is not None:
        es.save(run.path("eval_set.json"))
        return es.pairs
    return enumerate_pairs(parc, run.cfg.priors.scope)


def embedder_for(run: Run):
    r = run.cfg.retrieval
    if r.embedder is None:
        return HashingEmbedder(r.embedding_dim)
    try:
        return HttpEmbedder(r.embedder.endpoint, r.embedder.model, r.embedder.api_key_env)
    except EmbedderError as exc:
        raise ConfigError(f"retrieval.embedder: {exc}") from None


def reranker_for(run: Run) -> HttpReranker | None:
    r = run.cfg.retrieval
    if r.reranker is None:
        return None
    try:
        return HttpReranker(r.reranker.endpoint, r.reranker.model, r.reranker.api_key_env)
    except RerankerError as exc:
        raise ConfigError(f"retrieval.reranker: {exc}") from None


def index_for(run: Run) -> CorpusIndex:
    path = run.cfg.retrieval.index
    if path is None and (run.out / "index").is_dir():
        path = run.out / "index"
    return CorpusIndex.load(run.input("index", path))


def write_priors(run: Run, records: list[PriorRecord], parc: Parcellation, pairs) -> None:
    ok = [r for r in records if r.ok]
    n_failed = len(records) - len(ok)
    if n_failed:
        log.warning("%d of %d records failed", n_failed, len(records))
    no_lp = sum(NO_LOGPROBS in r.flags for r in ok)
    if no_lp:
        log.warning("%d records had no log-probabilities; their confidence is a hard 0/1", no_lp)
    p = run.cfg.priors
    run.extra["records"] = {"total": len(records), "failed": n_failed, "no_logprobs": no_lp,
                            "orderings": [o.value for o in Ordering if o in p.orderings], "repeats": p.repeats,
                            "model_id": run.cfg.model.model_id}
    if ok:
        matrix = aggregate(ok, parc)
        save_prior_matrix(matrix, run.path(PRIORS))
        run.extra["records"]["strategy"] = matrix.strategy.label
        run.extra["missing_pairs"] = [list(pr.key) for pr in matrix.missing(pairs)]
        run.extra["record_digests_sha256"] = hashlib.sha256(
            "".join(matrix.provenance["record_digests"]).encode()).hexdigest()


def cmd_priors(run: Run) -> None:
    parc = run.parcellation()
    pairs = pairs_for(run, parc)
    backend, settings, retry = build_backend(run)
    p = run.cfg.priors
    context = None
    if p.region_context:
        context = RegionContextProvider(index_for(run), backend, settings, retry=retry)
    plan = BatchPlan(parc, tuple(pairs), run.cfg.strategy, settings, frozenset(p.orderings), p.repeats,
                     p.concurrency, retry)
    records = run_batch(plan, backend, run.path(RECORDS), context)
    write_priors(run, records, parc, pairs)


def cmd_ground(run: Run) -> None:
    parc = run.parcellation()
    pairs = pairs_for(run, parc)
    backend, settings, retry = build_backend(run)
    index = index_for(run)
    embedder = embedder_for(run)
    r = run.cfg.retrieval
    reranker = reranker_for(run)
    fallback = CosineReranker(embedder)
    p = run.cfg.priors
    cache = run.path(RECORDS)
    done = {}
    if cache.exists():
        done = {x.key: x for x in read_records(cache, parc) if x.ok and x.model_id == settings.model_id}
    orderings = [o for o in Ordering if o in p.orderings]
    jobs = [(pair, o, k) for pair in pairs for o in orderings for k in range(p.repeats)
            if (*pair.key, o.value, k) not in done]
    lock = threading.Lock()

    def work(job):
        pair, ordering, repeat = job
        rec = grounded_query(index, pair, backend, settings, embedder, reranker, fallback, ordering, repeat, retry,
                             k_candidates=r.candidates, top_n=r.top_n, parcellation_id=parc.id)
        with lock, open(cache, "a", encoding="utf-8") as fh:
            append_record(fh, rec)
        return rec

    with ThreadPoolExecutor(max_workers=p.concurrency) as pool:
        fresh = list(pool.map(work, jobs))
    records = sort_records([*done.values(), *fresh])
    write_records(cache, records)
    if fresh and not done and not any(x.ok for x in fresh):
        raise BatchError(f"all {len(fresh)} grounded queries failed; first error: {fresh[0].error}")
    write_priors(run, records, parc, pairs)
    run.extra["strategy"] = RAG_STRATEGY.label


def cmd_evaluate(run: Run, records_path: str | None) -> None:
    parc = run.parcellation()
    es = eval_set_for(run, parc, required=True)
    src = Path(records_path) if records_path else run.out / RECORDS
    records = read_records(run.input("records", src), parc)
    if not records:
        raise EvaluationError(f"{src}: no records")
    groups: dict[tuple[str, str], list[PriorRecord]] = {}
    for r in records:
        groups.setdefault((r.model_id, r.strategy.label), []).append(r)

    report, table, scores, outcomes = [], [], {}, {}
    for (model, strategy), recs in sorted(groups.items()):
        entry: dict = {"model_id": model, "strategy": strategy}
        score = score_run(recs, es)
        entry["score"] = score.to_dict()
        label = f"{model}/{strategy}"
        scores[label] = score
        try:
            entry["stability"] = stability_report(recs, es).to_dict()
        except EvaluationError as exc:
            entry["stability"] = {"error": str(exc)}
        try:
            entry["separation"] = confidence_separation(recs, es).to_dict()
        except EvaluationError as exc:
            entry["separation"] = {"error": str(exc)}
        entry["disagreements"] = [d.to_dict() for d in disagreement_report(recs, es)]
        by_outcome: dict[str, list[float]] = {}
        labels = es.labels
        for r in recs:
            if r.ok and r.pair.key in labels and r.verdict_confidence is not None:
                by_outcome.setdefault(outcome_class(r, labels[r.pair.key]), []).append(r.verdict_confidence)
        outcomes[label] = by_outcome
        report.append(entry)
        table.append([model, strategy, format_mean_std(score.accuracy, score.accuracy_std),
                      format_mean_std(score.fp_rate, score.fp_rate_std),
                      format_mean_std(score.fn_rate, score.fn_rate_std)])

    md = ["## Accuracy", "", markdown_table(["model", "strategy", "accuracy", "FP rate", "FN rate"], table), ""]
    costs = None
    if run.cfg.evaluation.prices is not None:
        prices = load_price_table(run.input("prices", run.cfg.evaluation.prices))
        costs = [c.to_dict() for c in cost_report(records, prices)]
        md += ["## Cost", "", markdown_table(
            ["model", "strategy", "input tokens", "output tokens", "cost", "cost per run"],
            [[c["model_id"], c["strategy"], c["input_tokens"], c["output_tokens"], f"{c['cost']:.4f}",
              format_mean_std(c["run_cost_mean"], c["run_cost_std"])] for c in costs]), ""]
    for entry in report:
        rows = [[d["region_1"], d["region_2"], d["connected"],
                 "" if d["confidence"] is None else f"{d['confidence']:.3f}"] for d in entry["disagreements"]]
        if rows:
            md += [f"## Consistent disagreements: {entry['model_id']}/{entry['strategy']}", "",
                   markdown_table(["region 1", "region 2", "connected in atlas", "confidence"], rows), ""]
    _write_json(run.path(SCORES), _finite({"eval_set_size": len(es), "groups": report, "costs": costs}))
    run.path("scores.md").write_text("\n".join(md), encoding="utf-8")
    if run.cfg.run.figures:
        plotting.error_rates(scores, run.path("error_rates.png"))
        if len(outcomes) == 1:
            plotting.confidence_by_outcome(next(iter(outcomes.values())), run.path("confidence.png"))


def cmd_ingest(run: Run) -> None:
    r = run.cfg.retrieval
    corpus = run.input("corpus", r.corpus)
    docs = load_corpus_dir(corpus)
    index = ingest(docs, embedder_for(run), r.chunk_size, r.overlap, r.k1, r.b)
    index.save(run.out / "index")
    for name in ("chunks.jsonl", "bm25.json", "meta.json", "embeddings.npy"):
        run.path(f"index/{name}")
    run.extra["index"] = {"documents": len(docs), "chunks": len(index), "embedder": index.embedder_id}


def cmd_filter(run: Run, priors_path: str | None) -> None:
    parc = run.parcellation()
    f = run.cfg.filtering
    weights = load_connectome(run.input("weights", f.weights), parc, ConnectomeKind.COMMIT2_WEIGHT_SUM)
    src = priors_path or f.priors or (run.out / PRIORS)
    priors = load_prior_matrix(run.input("priors", src), parc)
    unfiltered = None
    if f.unfiltered is not None:
        unfiltered = load_connectome(run.input("unfiltered", f.unfiltered), parc, ConnectomeKind.STREAMLINE_COUNT)
    outcome = augment_filter(weights, priors, f.cutoff, unfiltered)
    save_connectome(outcome.filtered, run.path("filtered.csv"))
    save_provenance(outcome, run.path("provenance.csv"))
    summary = {"cutoff": f.cutoff, "n_added_by_llm": outcome.n_added_by_llm,
               "n_edges": outcome.filtered.n_edges, "n_microstructure": int(np.count_nonzero(np.triu(weights.weights > 0, 1)))}
    _write_json(run.path("filter.json"), summary)
    run.extra["filter"] = summary
    if run.cfg.run.figures:
        plotting.filter_heatmap(outcome, run.path("filter.png"))


def _grid(run: Run) -> np.ndarray:
    n = run.cfg.ndm
    if n.t_max <= n.t_min:
        raise ConfigError("ndm.t_max must exceed ndm.t_min")
    return default_t_grid(n.t_min, n.t_max, n.points)


def cmd_ndm(run: Run) -> None:
    parc = run.parcellation()
    n = run.cfg.ndm
    sources = dict(n.connectomes)
    if n.include_augmented and (run.out / "filtered.csv").exists():
        sources.setdefault("augmented", run.out / "filtered.csv")
    if not sources:
        raise ConfigError("ndm.connectomes lists no connectomes")
    target = load_target(run.input("target", n.target), parc, n.exclude)
    grid = _grid(run)
    fits = {}
    for name, path in sources.items():
        c = load_connectome(run.input(f"connectome:{name}", path), parc, ConnectomeKind.STREAMLINE_COUNT)
        fits[name] = fit(binarize(c), n.seed_region, target, grid, n.normalization)
    rows = [[name, f"{f.r:.4f}", f"{f.sse:.6g}", f"{f.t_star:.4g}"] for name, f in fits.items()]
    _write_json(run.path(FIT), {
        "seed_region": n.seed_region,
        "normalization": n.normalization.value,
        "fits": {name: f.to_dict(parc) for name, f in fits.items()},
        "table": [{"connectome": name, "r": f.r, "sse": f.sse, "t_star": f.t_star} for name, f in fits.items()],
    })
    run.path("fit.md").write_text(markdown_table(["connectome", "r", "SSE", "t*"], rows) + "\n", encoding="utf-8")
    if run.cfg.run.figures:
        plotting.fit_scatter(fits, target, run.path("fit.png"))


def cmd_permute(run: Run) -> None:
    parc = run.parcellation()
    n = run.cfg.ndm
    target = load_target(run.input("target", n.target), parc, n.exclude)
    base_src = n.base or run.cfg.filtering.weights
    base = binarize(load_connectome(run.input("base", base_src), parc, ConnectomeKind.COMMIT2_WEIGHT_SUM))
    cand_dir = Path(n.candidate) if n.candidate else run.out
    candidate = load_outcome(run.input("candidate_filtered", cand_dir / "filtered.csv"),
                             run.input("candidate_provenance", cand_dir / "provenance.csv"), parc,
                             run.cfg.filtering.cutoff)
    result = permutation_test(base, candidate, target, n.seed_region, n.trials, run.seed, _grid(run),
                              n.normalization, n.workers)
    _write_json(run.path("permutation.json"), _finite(result.to_dict()))
    result.save_null(run.path(NULL))
    run.extra["permutation"] = {"p_r": result.p_r, "p_sse": result.p_sse, "n_added": result.n_added}
    if run.cfg.run.figures:
        plotting.null_histograms(result, run.path("null.png"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tractprior", description="LLM-derived connectome priors")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration (TOML)")
        p.add_argument("--out", help="run directory; overrides run.out")
        p.add_argument("--replay", help="answer model requests from this store")
        p.add_argument("--record", help="record live model responses into this store")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        return p

    add("priors", "query the model for every pair and aggregate a prior matrix")
    add("evaluate", "score records against the evaluation set").add_argument("--records")
    add("ingest", "chunk and index a literature corpus")
    add("ground", "retrieval-grounded queries with verified citations")
    add("filter", "augment a microstructure-filtered connectome with priors").add_argument("--priors")
    add("ndm", "fit the network diffusion model to each connectome")
    add("permute", "random-edge permutation test of the augmented connectome")
    return ap


def dispatch(run: Run, args: argparse.Namespace) -> None:
    match args.command:
        case "priors":
            cmd_priors(run)
        case "evaluate":
            cmd_evaluate(run, args.records)
        case "ingest":
            cmd_ingest(run)
        case "ground":
            cmd_ground(run)
        case "filter":
            cmd_filter(run, args.priors)
        case "ndm":
            cmd_ndm(run)
        case "permute":
            cmd_permute(run)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, BatchError):
        return EXIT_BATCH
    if isinstance(exc, GatewayError):
        return EXIT_BACKEND
    if isinstance(exc, (ConnectomeError, EvaluationError, NDMError, RetrievalError, PriorError, PromptError,
                        FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    return EXIT_OTHER


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args.command, args)
        dispatch(run, args)
        run.write_manifest()
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code(exc)
        if code == EXIT_OTHER:
            log.exception("unexpected failure")
        print(f"tractprior {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
