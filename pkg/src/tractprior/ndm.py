"""Network diffusion model of pathology spread and its random-edge null.

The regional load evolves as x(t) = exp(-L t) x0 on a graph Laplacian L. The
diffusion rate is folded into t, so fitting searches a single time axis.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .connectome import Connectome, ConnectomeError, Parcellation
from .filtering import FilterOutcome

DEFAULT_SEED_REGION = "Entorhinal"


class NDMError(ValueError):
    pass


class DegenerateFitError(NDMError):
    pass


class Normalization(str, enum.Enum):
    UNNORMALIZED = "unnormalized"
    SYMMETRIC = "symmetric"


def _adjacency(c: Connectome | np.ndarray) -> np.ndarray:
    return c.weights if isinstance(c, Connectome) else np.asarray(c, dtype=float)


def laplacian(c: Connectome | np.ndarray, normalization: Normalization | str = Normalization.UNNORMALIZED) -> np.ndarray:
    a = _adjacency(c)
    deg = a.sum(axis=1)
    if Normalization(normalization) is Normalization.UNNORMALIZED:
        return np.diag(deg) - a
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(len(deg)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap[~nz, :] = 0.0  # isolated nodes do not diffuse
    return lap


class DiffusionOperator:
    """Spectral form of exp(-L t) for a symmetric Laplacian."""

    def __init__(self, lap: np.ndarray):
        lap = np.asarray(lap, dtype=float)
        if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
            raise NDMError("Laplacian must be square")
        scale = max(1.0, float(np.abs(lap).max(initial=0.0)))
        if np.abs(lap - lap.T).max(initial=0.0) > 1e-12 * scale:
            raise NDMError("Laplacian must be symmetric")
        self.evals, self.evecs = np.linalg.eigh((lap + lap.T) / 2)

    @property
    def n(self) -> int:
        return len(self.evals)

    def propagate(self, x0: np.ndarray, t: float) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if t == 0:
            return x0.copy()
        return self.evecs @ (np.exp(-self.evals * t) * (self.evecs.T @ x0))

    def trajectory(self, x0: np.ndarray, ts: Sequence[float]) -> np.ndarray:
        """Predictions stacked by time: shape (len(ts), n)."""
        coef = self.evecs.T @ np.asarray(x0, dtype=float)
        decay = np.exp(-np.outer(np.asarray(ts, dtype=float), self.evals))
        return (decay * coef) @ self.evecs.T


def simulate(lap: np.ndarray, x0: np.ndarray, t: float) -> np.ndarray:
    if t < 0:
        raise NDMError("t must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (np.shape(lap)[0],):
        raise NDMError("x0 dimension does not match the Laplacian")
    return DiffusionOperator(lap).propagate(x0, t)


def default_t_grid(t_min: float = 1e-3, t_max: float = 1e2, points: int = 200) -> np.ndarray:
    return np.logspace(math.log10(t_min), math.log10(t_max), points)


@dataclass(frozen=True, eq=False)
class RegionalVector:
    parcellation: Parcellation
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        m = np.asarray(self.mask, dtype=bool)
        if v.shape != (len(self.parcellation),) or m.shape != v.shape:
            raise NDMError("regional vector does not match the parcellation")
        if not np.all(np.isfinite(v[m])):
            raise NDMError("regional values must be finite")
        if not m.any():
            raise NDMError("fitting mask is empty")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)


def load_target(path: str | Path, parcellation: Parcellation, exclude: Sequence[str] = ()) -> RegionalVector:
    """Read ``region,value`` rows; regions that are missing or excluded are left out of the fit."""
    values = np.zeros(len(parcellation))
    mask = np.zeros(len(parcellation), dtype=bool)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")))
    if rows and [c.strip() for c in rows[0][:2]] == ["region", "value"]:
        rows = rows[1:]
    for row in rows:
        try:
            name, val = row[0].strip(), float(row[1])
        except (IndexError, ValueError):
            raise NDMError(f"{path}: expected 'region,value', got {row!r}") from None
        i = parcellation.region(name).index
        values[i] = val
        mask[i] = True
    for name in exclude:
        mask[parcellation.region(name).index] = False
    return RegionalVector(parcellation, values, mask)


@dataclass(frozen=True, eq=False)
class DiffusionFit:
    seed_region: str
    t_star: float
    r: float
    sse: float
    scale: float
    prediction: np.ndarray
    t_grid: np.ndarray
    r_by_t: np.ndarray = field(repr=False)

    def to_dict(self, parcellation: Parcellation | None = None) -> dict:
        d = {
            "seed_region": self.seed_region,
            "t_star": self.t_star,
            "r": self.r,
            "sse": self.sse,
            "scale": self.scale,
            "t_grid": {"min": float(self.t_grid[0]), "max": float(self.t_grid[-1]), "points": len(self.t_grid)},
            "prediction": self.prediction.tolist(),
        }
        if parcellation is not None:
            d["prediction"] = dict(zip(parcellation.names, self.prediction.tolist()))
        return d


def _pearson_rows(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson r of each row of ``p`` with ``y``; NaN where a row is constant."""
    pc = p - p.mean(axis=1, keepdims=True)
    yc = y - y.mean()
    sp = np.sqrt((pc**2).sum(axis=1))
    sy = math.sqrt(float(yc @ yc))
    scale = np.abs(p).max(axis=1) * math.sqrt(p.shape[1])
    flat = sp <= 1e-12 * np.maximum(scale, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (pc @ yc) / (sp * sy)
    r[flat] = np.nan
    return np.clip(r, -1.0, 1.0)


def fit_arrays(
    adjacency: np.ndarray,
    seed_index: int,
    target: np.ndarray,
    mask: np.ndarray,
    t_grid: np.ndarray,
    normalization: Normalization | str = Normalization.UNNORMALIZED,
    seed_name: str = "",
) -> DiffusionFit:
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0) or np.any(np.diff(t_grid) <= 0):
        raise NDMError("t grid must be non-negative and increasing")
    y = np.asarray(target, dtype=float)[mask]
    if np.ptp(y) == 0:
        raise DegenerateFitError("target is constant over the fitted regions")
    x0 = np.zeros(adjacency.shape[0])
    x0[seed_index] = 1.0
    op = DiffusionOperator(laplacian(adjacency, normalization))
    preds = op.trajectory(x0, t_grid)
    r = _pearson_rows(preds[:, mask], y)
    if np.all(np.isnan(r)):
        raise DegenerateFitError("prediction is constant over the fitted regions at every t")
    k = int(np.nanargmax(r))  # first maximum, i.e. the smallest t on ties
    p = preds[k, mask]
    scale = float(p @ y / (p @ p))
    sse = float(np.sum((scale * p - y) ** 2))
    return DiffusionFit(seed_name, float(t_grid[k]), float(r[k]), sse, scale, preds[k], t_grid, r)


def fit(
    connectome: Connectome,
    seed_region: str,
    target: RegionalVector,
    t_grid: np.ndarray | None = None,
    normalization: Normalization | str = Normalization.UNNORMALIZED,
) -> DiffusionFit:
    """Best-correlating diffusion time for a unit seed; SSE after least-squares rescaling."""
    p = connectome.parcellation
    if p.names != target.parcellation.names:
        raise ConnectomeError("connectome and target use different parcellations")
    grid = default_t_grid() if t_grid is None else t_grid
    return fit_arrays(connectome.weights, p.region(seed_region).index, target.values, target.mask, grid,
                      normalization, seed_region)


@dataclass(frozen=True, eq=False)
class PermutationResult:
    n_added: int
    trials: int
    observed_r: float
    observed_sse: float
    null_r: np.ndarray
    null_sse: np.ndarray
    p_r: float
    p_sse: float
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "n_added": self.n_added,
            "trials": self.trials,
            "rng_seed": self.rng_seed,
            "observed_r": self.observed_r,
            "observed_sse": self.observed_sse,
            "p_r": self.p_r,
            "p_sse": self.p_sse,
            "null_r_mean": float(np.nanmean(self.null_r)) if self.trials else None,
            "null_sse_mean": float(np.nanmean(self.null_sse)) if self.trials else None,
        }

    def save_null(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "r", "sse"])
            for i, (r, s) in enumerate(zip(self.null_r, self.null_sse)):
                w.writerow([i, repr(float(r)), repr(float(s))])


def permutation_p(observed: float, null: np.ndarray, greater_is_better: bool) -> float:
    """Add-one estimate of the chance a null draw does at least as well as observed."""
    null = np.asarray(null, dtype=float)
    hits = np.count_nonzero(null >= observed) if greater_is_better else np.count_nonzero(null <= observed)
    return (1 + int(hits)) / (len(null) + 1)


def random_edge_null(
    base: np.ndarray,
    n_added: int,
    seed_index: int,
    target: np.ndarray,
    mask: np.ndarray,
    t_grid: np.ndarray,
    trials: int,
    rng_seed: int,
    normalization: Normalization | str = Normalization.UNNORMALIZED,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit r and SSE after adding ``n_added`` random absent edges to ``base``, once per trial."""
    iu, ju = np.triu_indices(base.shape[0], 1)
    absent = np.flatnonzero(base[iu, ju] == 0)
    if n_added > len(absent):
        raise NDMError(f"cannot add {n_added} edges: only {len(absent)} are absent")
    streams = np.random.SeedSequence(rng_seed).spawn(trials)

    def one(k: int) -> tuple[float, float]:
        rng = np.random.default_rng(streams[k])
        a = base.copy()
        if n_added:
            pick = absent[rng.choice(len(absent), size=n_added, replace=False)]
            a[iu[pick], ju[pick]] = 1.0
            a[ju[pick], iu[pick]] = 1.0
        try:
            f = fit_arrays(a, seed_index, target, mask, t_grid, normalization)
        except DegenerateFitError:
            return float("nan"), float("nan")
        return f.r, f.sse

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(trials)))
    else:
        out = [one(k) for k in range(trials)]
    null_r = np.array([o[0] for o in out])
    null_sse = np.array([o[1] for o in out])
    return null_r, null_sse


def permutation_test(
    base: Connectome,
    candidate: FilterOutcome,
    target: RegionalVector,
    seed_region: str,
    trials: int = 1000,
    rng_seed: int = 0,
    t_grid: np.ndarray | None = None,
    normalization: Normalization | str = Normalization.UNNORMALIZED,
    workers: int = 1,
) -> PermutationResult:
    """Compare the augmented connectome's fit with fits after adding as many random edges to ``base``."""
    if base.parcellation.names != candidate.filtered.parcellation.names:
        raise ConnectomeError("base and candidate use different parcellations")
    grid = default_t_grid() if t_grid is None else t_grid
    observed = fit(candidate.filtered, seed_region, target, grid, normalization)
    n = candidate.n_added_by_llm
    seed_index = base.parcellation.region(seed_region).index
    adj = (base.weights > 0).astype(float)
    null_r, null_sse = random_edge_null(adj, n, seed_index, target.values, target.mask, grid, trials, rng_seed,
                                        normalization, workers)
    return PermutationResult(
        n, trials, observed.r, observed.sse, null_r, null_sse,
        permutation_p(observed.r, null_r, True), permutation_p(observed.sse, null_sse, False), rng_seed,
    )
