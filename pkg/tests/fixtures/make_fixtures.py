"""Regenerate the replay fixtures under tests/fixtures/pipeline.

The scripted model answers from an authored plan: 100 evaluation pairs, four
runs (forward/reverse x 2 repeats) with 89, 94, 91 and 90 correct verdicts,
so pooled accuracy is exactly 364/400 = 0.91. Responses are recorded through
the real gateway so request digests match what the CLI will send.

    python3 tests/fixtures/make_fixtures.py
"""

from __future__ import annotations

import json
import math
import re
import shutil
from pathlib import Path

import numpy as np

from tractprior.batch import BatchPlan, run_batch
from tractprior.connectome import (
    Connectome,
    ConnectomeKind,
    Parcellation,
    connectome_from_endpoints,
    enumerate_pairs,
    load_endpoints,
    save_connectome,
    save_parcellation,
)
from tractprior.evaluation import EvaluationSet, build_eval_set
from tractprior.gateway import ChatResponse, ModelSettings, RetryPolicy, Usage, record_session
from tractprior.ndm import DiffusionOperator, laplacian
from tractprior.prompts import Ordering, PromptStrategy
from tractprior.rag import CosineReranker, Document, HashingEmbedder, grounded_query, ingest

HERE = Path(__file__).parent / "pipeline"
MODEL = "fixture-model"
STRATEGY = PromptStrategy.parse("chain_of_thought+upv")

CORTICAL = [
    "CaudalAnteriorCingulate", "CaudalMiddleFrontal", "Cuneus", "Entorhinal", "Fusiform", "InferiorParietal",
    "InferiorTemporal", "IsthmusCingulate", "LateralOccipital", "LateralOrbitofrontal", "Lingual",
    "MedialOrbitofrontal", "MiddleTemporal", "Parahippocampal", "Paracentral", "ParsOpercularis",
    "ParsOrbitalis", "ParsTriangularis", "Pericalcarine", "Postcentral", "PosteriorCingulate", "Precentral",
    "Precuneus", "RostralAnteriorCingulate", "RostralMiddleFrontal", "SuperiorFrontal", "SuperiorParietal",
    "SuperiorTemporal", "Supramarginal", "TransverseTemporal", "Insula",
]
SUBCORTICAL = ["Thalamus", "Caudate", "Putamen", "Pallidum", "Hippocampus", "Amygdala", "Accumbens", "VentralDC"]
RUNS = [(Ordering.FORWARD, 0), (Ordering.FORWARD, 1), (Ordering.REVERSE, 0), (Ordering.REVERSE, 1)]
# correct (1) / wrong (0) per run for the nine unstable pairs; column sums 3, 8, 5, 4
UNSTABLE = [
    (1, 1, 0, 0), (1, 1, 1, 0), (1, 1, 0, 1), (0, 1, 1, 1), (0, 1, 1, 1),
    (0, 1, 1, 0), (0, 1, 0, 0), (0, 1, 0, 1), (0, 0, 1, 0),
]
N_DROPPED = 8


def parcellation() -> Parcellation:
    entries = [(n, "Left") for n in CORTICAL + SUBCORTICAL] + [("Brainstem", "Midline")]
    return Parcellation.from_names("parcellation", entries)


def write_atlas(parc: Parcellation, rng: np.random.Generator) -> tuple[Connectome, np.ndarray]:
    pairs = enumerate_pairs(parc)
    edges = [p for p in pairs if rng.random() < 0.2]
    counts = rng.choice(np.arange(20, 6000), size=len(edges), replace=False)
    lines = ["region_a,region_b,count"]
    for p, c in zip(edges, counts):
        # split some pairs over several rows so the loader has to accumulate
        parts = [int(c)] if rng.random() < 0.7 else [int(c) // 2, int(c) - int(c) // 2]
        for part in parts:
            a, b = (p.a.name, p.b.name) if rng.random() < 0.5 else (p.b.name, p.a.name)
            lines.append(f"{a},{b},{part}")
    (HERE / "atlas_endpoints.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    atlas = connectome_from_endpoints(load_endpoints(HERE / "atlas_endpoints.csv"), parc)
    return atlas, (atlas.weights > 0).astype(float)


def author_plan(es: EvaluationSet, rng: np.random.Generator) -> dict:
    """Per pair and run: (answer, confidence in that answer)."""
    labels = es.labels
    keys = sorted(labels)
    order = rng.permutation(len(keys))
    pos_idx = [i for i in order if labels[keys[i]]]
    neg_idx = [i for i in order if not labels[keys[i]]]
    wrong = pos_idx[:3] + neg_idx[:2]
    unstable = pos_idx[3:8] + neg_idx[2:6]
    abstain = neg_idx[6:8]
    plan = {}
    for i, key in enumerate(keys):
        if i in wrong:
            pattern = (0, 0, 0, 0)
        elif i in unstable:
            pattern = UNSTABLE[unstable.index(i)]
        else:
            pattern = (1, 1, 1, 1)
        truth = labels[key]
        runs = []
        for k, ok in enumerate(pattern):
            answer = truth if ok else not truth
            conf = float(rng.uniform(0.86, 0.995)) if ok else float(rng.uniform(0.55, 0.8))
            word = "True" if answer else "False"
            if i in abstain and k == abstain.index(i):
                word, conf = "don't know", 0.0
            runs.append((word, round(conf, 4)))
        plan[key] = runs
    return plan


class ScriptedModel:
    """Answers keyed by run and turn; the pair is read back out of the first user turn."""

    id = "scripted"
    _cot = re.compile(r"the (\w+) and the (\w+)\.")
    _rag = re.compile(r"within a hemisphere: (\w+), (\w+)\?")

    def __init__(self, plan: dict, parc: Parcellation, answer_json=None):
        self.plan, self.parc, self.answer_json = plan, parc, answer_json

    def send(self, request):
        users = [m for m in request.messages if m.role.value == "user"]
        text = users[0].content
        m = self._rag.search(text) or self._cot.search(text)
        r1, r2 = m.group(1), m.group(2)
        pair = self.parc.pair(r1, r2)
        ordering = Ordering.FORWARD if pair.canonical().a.name == r1 else Ordering.REVERSE
        usage = Usage(sum(len(x.content) for x in request.messages) // 4, 0)
        if self.answer_json is not None:
            body, lps = self.answer_json(pair.canonical(), len(users))
            return ChatResponse(body, lps, self.id, 0.0, Usage(usage.input_tokens, len(body) // 4))
        turn = len(users)
        if turn == 1:
            body = f"{r1} and {r2} are both grey matter regions; their positions constrain which tracts pass nearby."
            return ChatResponse(body, None, self.id, 0.0, Usage(usage.input_tokens, len(body) // 4))
        if turn == 2:
            body = f"Candidate pathways between {r1} and {r2} are considered in turn."
            return ChatResponse(body, None, self.id, 0.0, Usage(usage.input_tokens, len(body) // 4))
        run = RUNS.index((ordering, request.sample_index))
        word, conf = self.plan[pair.canonical().key][run]
        if word == "don't know":
            lps = (("don", -0.05), ("'t", -0.01), (" know", -0.02))
        else:
            lps = (("The", -0.3), (" answer", -0.1), (":", -0.01), (f" {word}", math.log(conf)))
        return ChatResponse(f"The answer: {word}", lps, self.id, 0.0, Usage(usage.input_tokens, 3))


def write_stores(parc: Parcellation, es: EvaluationSet, plan: dict) -> None:
    store = HERE / "store.jsonl"
    store.unlink(missing_ok=True)
    backend = record_session(ScriptedModel(plan, parc), store)
    settings = ModelSettings(MODEL, 0.0, True, 1024)
    batch = BatchPlan(parc, tuple(es.pairs), STRATEGY, settings, frozenset(Ordering), 2, 1, RetryPolicy(1))
    records = run_batch(batch, backend)
    assert sum(r.predicts_connected == es.labels[r.pair.key] for r in records) == 364


def write_connectomes(parc: Parcellation, atlas: Connectome, truth: np.ndarray, es: EvaluationSet,
                      plan: dict, rng: np.random.Generator) -> None:
    n = len(parc)
    stable_pos = [p for p in es.positives if all(w == "True" for w, _ in plan[p.key])]
    dropped = stable_pos[:N_DROPPED]
    eval_keys = set(es.labels)
    # the tractogram also reconstructs some false connections
    extra = [p for p in enumerate_pairs(parc) if truth[p.a.index, p.b.index] == 0 and p.key not in eval_keys]
    extra = [extra[i] for i in sorted(rng.choice(len(extra), size=60, replace=False))]
    unfiltered = atlas.weights.copy()
    for p in extra:
        unfiltered[p.a.index, p.b.index] = unfiltered[p.b.index, p.a.index] = int(rng.integers(1, 40))
    save_connectome(Connectome(parc, unfiltered, ConnectomeKind.STREAMLINE_COUNT), HERE / "unfiltered.csv")
    weights = np.round(atlas.weights * 0.0125, 4)
    for p in dropped:
        weights[p.a.index, p.b.index] = weights[p.b.index, p.a.index] = 0.0
    save_connectome(Connectome(parc, weights, ConnectomeKind.COMMIT2_WEIGHT_SUM), HERE / "weights.csv")

    x0 = np.zeros(n)
    x0[parc.region("Entorhinal").index] = 1.0
    x = DiffusionOperator(laplacian(truth)).propagate(x0, 1.5)
    lines = ["region,value"] + [f"{r.name},{1.0 + 4.0 * v:.8f}" for r, v in zip(parc.regions, x)]
    (HERE / "target.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


CORPUS = [
    ("PMC1000001", "Diffusion tractography of the human cingulum bundle",
     "In healthy human volunteers, tractography showed the cingulum linking the PosteriorCingulate and the "
     "Precuneus, with further fibres reaching the Parahippocampal gyrus and the Entorhinal cortex."),
    ("PMC1000002", "Arcuate fasciculus terminations in humans",
     "The arcuate fasciculus connects the ParsOpercularis with the SuperiorTemporal and MiddleTemporal gyri "
     "in the human brain. Terminations were also found in the Supramarginal gyrus."),
    ("PMC1000003", "Tracer study of orbitofrontal projections in the macaque",
     "In macaque monkeys, tracer injections into the LateralOrbitofrontal cortex labelled fibres to the "
     "Insula and the Amygdala. These animal data may not transfer to humans."),
    ("PMC1000004", "Occipital white matter pathways",
     "Human dissection studies show the inferior longitudinal fasciculus joining the LateralOccipital and the "
     "InferiorTemporal cortex, and short fibres linking the Cuneus with the Pericalcarine cortex."),
    ("PMC1000005", "Frontal aslant tract anatomy",
     "The frontal aslant tract links the SuperiorFrontal gyrus with the ParsOpercularis in humans. "
     "No direct connection between the SuperiorFrontal and the Cuneus was observed."),
]
GROUND_PAIRS = [("PosteriorCingulate", "Precuneus"), ("ParsOpercularis", "SuperiorTemporal"),
                ("Cuneus", "SuperiorFrontal"), ("Insula", "LateralOrbitofrontal")]


def rag_answer(pair, turn):
    connected = pair.key != ("Cuneus", "SuperiorFrontal")
    word = "True" if connected else "False"
    pmcid, title = {
        ("PosteriorCingulate", "Precuneus"): CORPUS[0][:2],
        ("ParsOpercularis", "SuperiorTemporal"): CORPUS[1][:2],
        ("Cuneus", "SuperiorFrontal"): CORPUS[4][:2],
    }.get(pair.key, ("PMC9999999", "An article that is not in the corpus"))
    body = json.dumps({"connection": word, "evidence": f"The snippets discuss {pair.a.name} and {pair.b.name}.",
                       "citations": [{"title": title, "pmcid": pmcid}]})
    lps = (('{"connection": "', -0.01), (word, math.log(0.93 if connected else 0.88)), ('", ...', -0.2))
    return body, lps


def write_ground(parc: Parcellation) -> None:
    corpus = HERE / "corpus"
    shutil.rmtree(corpus, ignore_errors=True)
    corpus.mkdir()
    for pmcid, title, text in CORPUS:
        doc = {"pmcid": pmcid, "title": title, "keywords": [], "text": text}
        (corpus / f"{pmcid}.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    pairs = [parc.pair(a, b).canonical() for a, b in GROUND_PAIRS]
    es = EvaluationSet(tuple(pairs[:2]), tuple(pairs[2:]), 0, parc.id, "hand-picked")
    es.save(HERE / "eval_ground.json")
    embedder = HashingEmbedder(256)
    index = ingest([Document(t, ti, pm) for pm, ti, t in CORPUS], embedder)
    store = HERE / "ground_store.jsonl"
    store.unlink(missing_ok=True)
    backend = record_session(ScriptedModel({}, parc, rag_answer), store)
    settings = ModelSettings(MODEL, 0.0, True, 1024)
    for pair in es.pairs:
        rec = grounded_query(index, pair, backend, settings, embedder, None, CosineReranker(embedder),
                             Ordering.FORWARD, 0, RetryPolicy(1), parcellation_id=parc.id)
        assert rec.ok, rec.error


def main() -> None:
    HERE.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240)
    parc = parcellation()
    save_parcellation(parc, HERE / "parcellation.csv")
    atlas, truth = write_atlas(parc, rng)
    es = build_eval_set(atlas, 50, 50, seed=0)
    plan = author_plan(es, rng)
    write_stores(parc, es, plan)
    write_connectomes(parc, atlas, truth, es, plan, rng)
    (HERE / "prices.csv").write_text("model_id,input_per_1k,output_per_1k\nfixture-model,0.0025,0.01\n"
                                     "free-model,0,0\n", encoding="utf-8")
    write_ground(parc)


if __name__ == "__main__":
    main()
