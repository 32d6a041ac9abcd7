"""Mann-Whitney U with midrank ties.

Small samples use the exact permutation distribution of the (tied) rank sum,
counted by dynamic programming over doubled midranks so every comparison is
integer-exact. Larger samples use the normal approximation with tie and
continuity corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EXACT_MAX_GROUP = 20


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_two_sided: float
    n1: int
    n2: int
    method: str

    def __str__(self) -> str:
        return f"U = {self.u:.1f}, p = {self.p_two_sided:.1e}"


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _doubled_ranks(x, y) -> tuple[np.ndarray, int, int]:
    pooled = np.concatenate([np.asarray(x, float), np.asarray(y, float)])
    r2 = np.rint(2 * midranks(pooled)).astype(np.int64)
    return r2, len(x), len(y)


def subset_sum_counts(weights: Sequence[int], k: int) -> np.ndarray:
    """counts[s] = number of size-``k`` subsets of ``weights`` summing to ``s``."""
    total = int(sum(weights))
    counts = np.zeros((k + 1, total + 1), dtype=np.int64)
    counts[0, 0] = 1
    for used, w in enumerate(weights, 1):
        w = int(w)
        for m in range(min(used, k), 0, -1):
            counts[m, w:] += counts[m - 1, : total + 1 - w]
    return counts[k]


def exact_p_value(x, y) -> float:
    r2, n1, n2 = _doubled_ranks(x, y)
    centre = n1 * (n1 + 1) + n1 * n2  # doubled rank sum under no separation
    observed = abs(int(r2[:n1].sum()) - centre)
    counts = subset_sum_counts(r2, n1)
    s = np.arange(len(counts))
    extreme = int(counts[np.abs(s - centre) >= observed].sum())
    return extreme / math.comb(n1 + n2, n1)


def normal_p_value(x, y) -> float:
    n1, n2 = len(x), len(y)
    n = n1 + n2
    ranks = midranks(np.concatenate([np.asarray(x, float), np.asarray(y, float)]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2)))


def mann_whitney(x: Sequence[float], y: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided test; U is reported for the first group."""
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise StatsError("both groups need at least one observation")
    ranks = midranks(np.concatenate([np.asarray(x, float), np.asarray(y, float)]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    if method == "auto":
        method = "exact" if max(n1, n2) <= EXACT_MAX_GROUP else "normal"
    if method == "exact":
        p = exact_p_value(x, y)
    elif method == "normal":
        p = normal_p_value(x, y)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MannWhitneyResult(u, p, n1, n2, method)
