"""Scoring prior runs against an atlas-derived evaluation set."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .connectome import Connectome, Parcellation, PairScope, RegionPair, enumerate_pairs
from .priors import PriorMatrix, PriorRecord, classify
from .stats import MannWhitneyResult, mann_whitney


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationSet:
    positives: tuple[RegionPair, ...]
    negatives: tuple[RegionPair, ...]
    rng_seed: int
    parcellation_id: str = ""
    source: str = ""

    def __post_init__(self):
        pos = {p.key for p in self.positives}
        neg = {p.key for p in self.negatives}
        if len(pos) != len(self.positives) or len(neg) != len(self.negatives):
            raise EvaluationError("duplicate pairs in evaluation set")
        if pos & neg:
            raise EvaluationError("positive and negative pairs overlap")

    @property
    def pairs(self) -> list[RegionPair]:
        return sorted([*self.positives, *self.negatives], key=lambda p: p.key)

    @property
    def labels(self) -> dict[tuple[str, str], bool]:
        out = {p.key: True for p in self.positives}
        out.update({p.key: False for p in self.negatives})
        return out

    def __len__(self):
        return len(self.positives) + len(self.negatives)

    def to_dict(self) -> dict:
        return {
            "parcellation": self.parcellation_id,
            "rng_seed": self.rng_seed,
            "source": self.source,
            "positives": [list(p.key) for p in self.positives],
            "negatives": [list(p.key) for p in self.negatives],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, parcellation: Parcellation) -> "EvaluationSet":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            tuple(parcellation.pair(a, b).canonical() for a, b in d["positives"]),
            tuple(parcellation.pair(a, b).canonical() for a, b in d["negatives"]),
            int(d.get("rng_seed", 0)),
            d.get("parcellation", parcellation.id),
            d.get("source", ""),
        )


def build_eval_set(
    atlas: Connectome,
    n_pos: int = 50,
    n_neg: int = 50,
    seed: int = 0,
    scope: PairScope | str = PairScope.WITHIN_HEMISPHERE,
) -> EvaluationSet:
    """Top ``n_pos`` pairs by streamline count, plus ``n_neg`` random pairs with none."""
    candidates = enumerate_pairs(atlas.parcellation, scope)
    w = atlas.weights
    connected = [p for p in candidates if w[p.a.index, p.b.index] > 0]
    empty = [p for p in candidates if w[p.a.index, p.b.index] == 0]
    if len(connected) < n_pos:
        raise EvaluationError(f"atlas has {len(connected)} connected pairs, need {n_pos}")
    if len(empty) < n_neg:
        raise EvaluationError(f"atlas has {len(empty)} unconnected pairs, need {n_neg}")
    connected.sort(key=lambda p: (-w[p.a.index, p.b.index], p.key))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(empty), size=n_neg, replace=False)
    negatives = sorted((empty[i] for i in picks), key=lambda p: p.key)
    return EvaluationSet(tuple(connected[:n_pos]), tuple(negatives), seed, atlas.parcellation.id)


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def fp_rate(self) -> float:
        n = self.fp + self.tn
        return self.fp / n if n else float("nan")

    @property
    def fn_rate(self) -> float:
        p = self.tp + self.fn
        return self.fn / p if p else float("nan")

    def __add__(self, o: "Confusion") -> "Confusion":
        return Confusion(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn + o.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(predictions: Mapping[tuple[str, str], bool], eval_set: EvaluationSet) -> Confusion:
    tp = fp = tn = fn = 0
    for key, label in eval_set.labels.items():
        if key not in predictions:
            raise EvaluationError(f"no verdict for evaluation pair {key}")
        pred = predictions[key]
        if label:
            tp += pred
            fn += not pred
        else:
            fp += pred
            tn += not pred
    return Confusion(tp, fp, tn, fn)


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    # population std across repeats
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std())


@dataclass(frozen=True)
class RunScore:
    per_run: Mapping[str, Confusion]

    @property
    def confusion(self) -> Confusion:
        total = Confusion()
        for c in self.per_run.values():
            total = total + c
        return total

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    @property
    def fp_rate(self) -> float:
        return self.confusion.fp_rate

    @property
    def fn_rate(self) -> float:
        return self.confusion.fn_rate

    @property
    def per_run_accuracy(self) -> dict[str, float]:
        return {k: c.accuracy for k, c in self.per_run.items()}

    @property
    def accuracy_std(self) -> float:
        return _mean_std([c.accuracy for c in self.per_run.values()])[1]

    @property
    def fp_rate_std(self) -> float:
        return _mean_std([c.fp_rate for c in self.per_run.values()])[1]

    @property
    def fn_rate_std(self) -> float:
        return _mean_std([c.fn_rate for c in self.per_run.values()])[1]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_std": self.accuracy_std,
            "fp_rate": self.fp_rate,
            "fp_rate_std": self.fp_rate_std,
            "fn_rate": self.fn_rate,
            "fn_rate_std": self.fn_rate_std,
            "confusion": self.confusion.to_dict(),
            "per_run": {k: {"accuracy": c.accuracy, **c.to_dict()} for k, c in self.per_run.items()},
            "summary": format_mean_std(self.accuracy, self.accuracy_std),
        }


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def run_label(record: PriorRecord) -> str:
    return f"{record.ordering.value}-{record.repeat}"


def group_runs(records: Sequence[PriorRecord]) -> dict[str, list[PriorRecord]]:
    runs: dict[str, list[PriorRecord]] = {}
    for r in sorted(records, key=lambda r: (r.ordering.value, r.repeat, r.pair.key)):
        runs.setdefault(run_label(r), []).append(r)
    return runs


def score_run(records: Sequence[PriorRecord], eval_set: EvaluationSet) -> RunScore:
    """Confusion counts for each (ordering, repeat) run of verdicts."""
    labels = eval_set.labels
    per_run = {}
    for label, recs in group_runs([r for r in records if r.pair.key in labels]).items():
        preds = {r.pair.key: r.predicts_connected for r in recs if r.ok}
        per_run[label] = confusion(preds, eval_set)
    if not per_run:
        raise EvaluationError("no records cover the evaluation set")
    return RunScore(per_run)


def score_matrix(matrix: PriorMatrix, eval_set: EvaluationSet, cutoff: float = 0.5) -> RunScore:
    edges = classify(matrix, cutoff).weights
    preds = {}
    for p in eval_set.pairs:
        if matrix.counts[p.a.index, p.b.index]:
            preds[p.key] = bool(edges[p.a.index, p.b.index])
    return RunScore({"aggregate": confusion(preds, eval_set)})


@dataclass(frozen=True)
class StabilityReport:
    n_pairs: int
    n_runs: int
    consistent: tuple[tuple[str, str], ...]
    inconsistent: tuple[tuple[str, str], ...]
    ordering_determined: tuple[tuple[str, str], ...]
    run_accuracy: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_consistent(self) -> int:
        return len(self.consistent)

    @property
    def accuracy_range(self) -> tuple[float, float] | None:
        if not self.run_accuracy:
            return None
        vals = list(self.run_accuracy.values())
        return min(vals), max(vals)

    def to_dict(self) -> dict:
        rng = self.accuracy_range
        return {
            "n_pairs": self.n_pairs,
            "n_runs": self.n_runs,
            "n_consistent": self.n_consistent,
            "inconsistent": [list(k) for k in self.inconsistent],
            "ordering_determined": [list(k) for k in self.ordering_determined],
            "run_accuracy": dict(self.run_accuracy),
            "accuracy_range": None if rng is None else list(rng),
        }


def stability_report(records: Sequence[PriorRecord], eval_set: EvaluationSet | None = None) -> StabilityReport:
    """Pairs with identical verdicts in every run, and pairs whose verdict follows the ordering."""
    usable = [r for r in records if r.ok]
    runs = {run_label(r) for r in usable}
    if len(runs) < 2:
        raise EvaluationError("stability needs at least 2 repeats")
    by_pair: dict[tuple[str, str], list[PriorRecord]] = {}
    for r in usable:
        by_pair.setdefault(r.pair.key, []).append(r)
    consistent, inconsistent, ordered = [], [], []
    for key in sorted(by_pair):
        recs = by_pair[key]
        verdicts = {r.predicts_connected for r in recs}
        if len(verdicts) == 1:
            consistent.append(key)
            continue
        inconsistent.append(key)
        per_order: dict[str, set[bool]] = {}
        for r in recs:
            per_order.setdefault(r.ordering.value, set()).add(r.predicts_connected)
        if len(per_order) == 2 and all(len(v) == 1 for v in per_order.values()):
            ordered.append(key)
    run_acc = {}
    if eval_set is not None:
        run_acc = score_run(usable, eval_set).per_run_accuracy
    return StabilityReport(len(by_pair), len(runs), tuple(consistent), tuple(inconsistent), tuple(ordered), run_acc)


@dataclass(frozen=True)
class SeparationResult:
    test: MannWhitneyResult
    agree: tuple[float, ...]
    diverge: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "U": self.test.u,
            "p_two_sided": self.test.p_two_sided,
            "n_agree": self.test.n1,
            "n_diverge": self.test.n2,
            "method": self.test.method,
            "report": str(self.test),
            "mean_confidence_agree": float(np.mean(self.agree)),
            "mean_confidence_diverge": float(np.mean(self.diverge)),
        }


def outcome_class(record: PriorRecord, label: bool) -> str:
    if record.predicts_connected:
        return "TP" if label else "FP"
    return "FN" if label else "TN"


def confidence_separation(records: Sequence[PriorRecord], eval_set: EvaluationSet) -> SeparationResult:
    """Compare confidence-in-own-verdict between records that agree and diverge with the atlas."""
    labels = eval_set.labels
    agree, diverge = [], []
    for r in records:
        if r.pair.key not in labels:
            continue
        c = r.verdict_confidence
        if c is None:
            continue
        (agree if r.predicts_connected == labels[r.pair.key] else diverge).append(c)
    if not agree or not diverge:
        raise EvaluationError(f"degenerate groups: {len(agree)} agreeing, {len(diverge)} diverging records")
    return SeparationResult(mann_whitney(agree, diverge), tuple(agree), tuple(diverge))


@dataclass(frozen=True)
class DisagreementRow:
    region_a: str
    region_b: str
    connected: bool
    confidence: float
    n_records: int

    def to_dict(self) -> dict:
        return {
            "region_1": self.region_a,
            "region_2": self.region_b,
            "connected": self.connected,
            "confidence": self.confidence,
            "n_records": self.n_records,
        }


def disagreement_report(records: Sequence[PriorRecord], eval_set: EvaluationSet) -> list[DisagreementRow]:
    """Pairs whose verdict contradicts the atlas in every record, least confident first."""
    labels = eval_set.labels
    by_pair: dict[tuple[str, str], list[PriorRecord]] = {}
    for r in records:
        if r.ok and r.pair.key in labels:
            by_pair.setdefault(r.pair.key, []).append(r)
    rows = []
    for key, recs in by_pair.items():
        label = labels[key]
        if all(r.predicts_connected != label for r in recs):
            confs = [c for c in (r.verdict_confidence for r in recs) if c is not None]
            conf = math.fsum(confs) / len(confs) if confs else float("nan")
            rows.append(DisagreementRow(key[0], key[1], label, conf, len(recs)))
    rows.sort(key=lambda r: (math.isnan(r.confidence), r.confidence, r.region_a, r.region_b))
    return rows


@dataclass(frozen=True)
class Price:
    input_per_1k: float
    output_per_1k: float


def load_price_table(path: str | Path) -> dict[str, Price]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#"))]
    if rows and rows[0][:3] == ["model_id", "input_per_1k", "output_per_1k"]:
        rows = rows[1:]
    for r in rows:
        out[r[0].strip()] = Price(float(r[1]), float(r[2]))
    return out


@dataclass(frozen=True)
class CostRow:
    model_id: str
    strategy: str
    input_tokens: int
    output_tokens: int
    cost: float
    run_cost_mean: float
    run_cost_std: float

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "strategy": self.strategy,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost": self.cost,
            "run_cost_mean": self.run_cost_mean,
            "run_cost_std": self.run_cost_std,
        }


def token_cost(input_tokens: int, output_tokens: int, price: Price) -> float:
    return input_tokens / 1000.0 * price.input_per_1k + output_tokens / 1000.0 * price.output_per_1k


def cost_report(records: Sequence[PriorRecord], prices: Mapping[str, Price]) -> list[CostRow]:
    """Token totals and cost per (model, strategy); also mean ± std cost per run."""
    groups: dict[tuple[str, str], list[PriorRecord]] = {}
    for r in records:
        groups.setdefault((r.model_id, r.strategy.label), []).append(r)
    rows = []
    for (model, strategy), recs in sorted(groups.items()):
        if model not in prices:
            raise EvaluationError(f"no price entry for model {model!r}")
        price = prices[model]
        tin = sum(r.usage.input_tokens for r in recs)
        tout = sum(r.usage.output_tokens for r in recs)
        per_run = [
            token_cost(sum(r.usage.input_tokens for r in rs), sum(r.usage.output_tokens for r in rs), price)
            for rs in group_runs(recs).values()
        ]
        mean, std = _mean_std(per_run)
        rows.append(CostRow(model, strategy, tin, tout, token_cost(tin, tout, price), mean, std))
    return rows


def markdown_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(c) for c in r) + " |")
    return "\n".join(lines)
