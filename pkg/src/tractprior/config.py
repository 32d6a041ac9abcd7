"""Run configuration: one TOML file with nested sections, validated before any network call.

Relative paths are resolved against the directory holding the config file.
Credentials never appear here; sections name the environment variable to read.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .connectome import PairScope
from .gateway import ConfigError
from .ndm import DEFAULT_SEED_REGION, Normalization
from .prompts import Ordering, PromptStrategy


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(_Section):
    parcellation: Path
    out: Optional[Path] = None
    seed: int = 0
    figures: bool = True


class ModelSection(_Section):
    model_id: str
    endpoint: Optional[str] = None
    api_key_env: Optional[str] = "OPENAI_API_KEY"
    temperature: float = 0.0
    logprobs: bool = True
    max_output_tokens: int = Field(1024, ge=1)
    max_attempts: int = Field(5, ge=1)
    backoff_base: float = Field(1.0, ge=0)
    timeout: float = Field(60.0, gt=0)
    replay: Optional[Path] = None
    record: Optional[Path] = None


class PriorsSection(_Section):
    strategy: str = "chain_of_thought+upv"
    orderings: list[Ordering] = [Ordering.FORWARD, Ordering.REVERSE]
    repeats: int = Field(1, ge=1)
    concurrency: int = Field(4, ge=1)
    scope: PairScope = PairScope.WITHIN_HEMISPHERE
    region_context: bool = False

    @field_validator("strategy")
    @classmethod
    def _strategy(cls, v: str) -> str:
        PromptStrategy.parse(v)
        return v

    @field_validator("orderings")
    @classmethod
    def _orderings(cls, v: list[Ordering]) -> list[Ordering]:
        if not v or len(set(v)) != len(v):
            raise ValueError("orderings must be non-empty and distinct")
        return v


class EvaluationSection(_Section):
    eval_set: Optional[Path] = None
    atlas: Optional[Path] = None
    n_positive: int = Field(50, ge=1)
    n_negative: int = Field(50, ge=1)
    prices: Optional[Path] = None
    cutoff: float = Field(0.5, ge=0, le=1)


class ServiceSection(_Section):
    endpoint: str
    model: str
    api_key_env: str


class RetrievalSection(_Section):
    corpus: Optional[Path] = None
    index: Optional[Path] = None
    chunk_size: int = Field(2500, ge=1)
    overlap: int = Field(200, ge=0)
    k1: float = Field(1.2, ge=0)
    b: float = Field(0.75, ge=0, le=1)
    rrf_k: int = Field(60, ge=1)
    candidates: int = Field(20, ge=1, le=20)
    top_n: int = Field(5, ge=1, le=5)
    embedding_dim: int = Field(256, ge=1)
    embedder: Optional[ServiceSection] = None
    reranker: Optional[ServiceSection] = None


class FilteringSection(_Section):
    weights: Optional[Path] = None
    unfiltered: Optional[Path] = None
    priors: Optional[Path] = None
    cutoff: float = Field(0.5, ge=0, le=1)


class NdmSection(_Section):
    target: Optional[Path] = None
    exclude: list[str] = []
    seed_region: str = DEFAULT_SEED_REGION
    connectomes: dict[str, Path] = {}
    include_augmented: bool = True
    normalization: Normalization = Normalization.UNNORMALIZED
    t_min: float = Field(1e-3, gt=0)
    t_max: float = Field(1e2, gt=0)
    points: int = Field(200, ge=2)
    base: Optional[Path] = None
    candidate: Optional[Path] = None
    trials: int = Field(1000, ge=1)
    workers: int = Field(1, ge=1)


class RunConfig(_Section):
    run: RunSection
    model: Optional[ModelSection] = None
    priors: PriorsSection = PriorsSection()
    evaluation: EvaluationSection = EvaluationSection()
    retrieval: RetrievalSection = RetrievalSection()
    filtering: FilteringSection = FilteringSection()
    ndm: NdmSection = NdmSection()

    @property
    def strategy(self) -> PromptStrategy:
        return PromptStrategy.parse(self.priors.strategy)


_PATH_KEYS = {
    "run": ("parcellation", "out"),
    "model": ("replay", "record"),
    "evaluation": ("eval_set", "atlas", "prices"),
    "retrieval": ("corpus", "index"),
    "filtering": ("weights", "unfiltered", "priors"),
    "ndm": ("target", "base", "candidate"),
}


def _absolutise(raw: dict, base: Path) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for section, keys in _PATH_KEYS.items():
        sec = out.get(section)
        if not isinstance(sec, dict):
            continue
        for k in keys:
            if isinstance(sec.get(k), str):
                sec[k] = str(base / sec[k])
    ndm = out.get("ndm")
    if isinstance(ndm, dict) and isinstance(ndm.get("connectomes"), dict):
        ndm["connectomes"] = {k: str(base / v) if isinstance(v, str) else v for k, v in ndm["connectomes"].items()}
    return out


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    try:
        return RunConfig.model_validate(_absolutise(raw, Path(base_dir).resolve()))
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)
