"""LLM-augmented tractogram filtering.

An edge survives if the microstructure filter kept it (positive weight sum) or
the prior reaches the cutoff. The prior never removes an edge, and when an
unfiltered count matrix is supplied it never adds one the tractogram lacks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .connectome import (
    Connectome,
    ConnectomeError,
    ConnectomeKind,
    RegionPair,
    load_connectome,
    read_matrix_csv,
    write_matrix_csv,
)
from .priors import PriorMatrix


class Provenance(enum.IntEnum):
    NONE = 0
    MICROSTRUCTURE_ONLY = 1
    LLM_ONLY = 2
    BOTH = 3


PROVENANCE_LABELS = {
    Provenance.NONE: "",
    Provenance.MICROSTRUCTURE_ONLY: "MicrostructureOnly",
    Provenance.LLM_ONLY: "LlmOnly",
    Provenance.BOTH: "Both",
}


@dataclass(frozen=True, eq=False)
class FilterOutcome:
    filtered: Connectome
    provenance: np.ndarray
    cutoff: float

    @property
    def n_added_by_llm(self) -> int:
        return int(np.count_nonzero(np.triu(self.provenance == Provenance.LLM_ONLY, 1)))

    def count(self, label: Provenance) -> int:
        return int(np.count_nonzero(np.triu(self.provenance == label, 1)))


def _prior_values(priors: PriorMatrix | Connectome | np.ndarray) -> np.ndarray:
    if isinstance(priors, PriorMatrix):
        return np.where(priors.observed, priors.values, 0.0)
    if isinstance(priors, Connectome):
        return priors.weights
    return np.asarray(priors, dtype=float)


def augment_filter(
    weights: Connectome,
    priors: PriorMatrix | Connectome | np.ndarray,
    cutoff: float = 0.5,
    unfiltered: Connectome | None = None,
) -> FilterOutcome:
    p = weights.parcellation
    for other in (priors, unfiltered):
        if isinstance(other, (PriorMatrix, Connectome)) and other.parcellation.names != p.names:
            raise ConnectomeError("parcellation mismatch between filter inputs")
    prior = _prior_values(priors)
    if prior.shape != weights.weights.shape:
        raise ConnectomeError(f"prior matrix shape {prior.shape} does not match {weights.weights.shape}")
    kept = weights.weights > 0
    llm = prior >= cutoff
    if unfiltered is not None:
        llm &= unfiltered.weights > 0
    np.fill_diagonal(llm, False)
    prov = np.full(kept.shape, Provenance.NONE, dtype=int)
    prov[kept & ~llm] = Provenance.MICROSTRUCTURE_ONLY
    prov[~kept & llm] = Provenance.LLM_ONLY
    prov[kept & llm] = Provenance.BOTH
    filtered = Connectome(p, (kept | llm).astype(float), ConnectomeKind.BINARY)
    return FilterOutcome(filtered, prov, cutoff)


def added_edges(outcome: FilterOutcome) -> list[RegionPair]:
    regs = outcome.filtered.parcellation.regions
    idx = np.argwhere(np.triu(outcome.provenance == Provenance.LLM_ONLY, 1))
    return sorted((RegionPair(regs[i], regs[j]).canonical() for i, j in idx), key=lambda pr: pr.key)


def save_provenance(outcome: FilterOutcome, path: str | Path) -> None:
    cells = [[PROVENANCE_LABELS[Provenance(v)] for v in row] for row in outcome.provenance]
    write_matrix_csv(path, outcome.filtered.parcellation.names, cells)


def load_outcome(filtered_path: str | Path, provenance_path: str | Path, parcellation, cutoff: float = 0.5) -> FilterOutcome:
    filtered = load_connectome(filtered_path, parcellation, ConnectomeKind.BINARY)
    names, cells = read_matrix_csv(provenance_path)
    if names != parcellation.names:
        raise ConnectomeError(f"{provenance_path}: region labels do not match parcellation")
    lookup = {v: k for k, v in PROVENANCE_LABELS.items()}
    try:
        prov = np.array([[int(lookup[c]) for c in row] for row in cells])
    except KeyError as exc:
        raise ConnectomeError(f"{provenance_path}: unknown provenance label {exc}") from None
    if not np.array_equal((prov > 0).astype(float), filtered.weights):
        raise ConnectomeError("provenance labels disagree with the filtered connectome")
    return FilterOutcome(filtered, prov, cutoff)
