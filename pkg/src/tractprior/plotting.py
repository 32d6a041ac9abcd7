"""Report figures. Everything renders off-screen to PNG with fixed metadata so reruns are byte-identical."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .evaluation import RunScore, SeparationResult  # noqa: E402
from .filtering import FilterOutcome, Provenance  # noqa: E402
from .ndm import DiffusionFit, PermutationResult, RegionalVector  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "tractprior",
}

# grey for microstructure-only edges, pink for prior-only, dark for both
PROVENANCE_COLOURS = ["#ffffff", "#9e9e9e", "#e377c2", "#303030"]


def save(fig, path: str | Path, dpi: int = 150) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=dpi, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def error_rates(scores: Mapping[str, RunScore], path: str | Path) -> Path:
    """Grouped false-positive and false-negative rates with run-to-run std."""
    labels = list(scores)
    x = np.arange(len(labels))
    fp = [scores[k].fp_rate for k in labels]
    fn = [scores[k].fn_rate for k in labels]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(labels) + 1.5), 3.2))
        ax.bar(x - 0.2, fp, 0.4, yerr=[scores[k].fp_rate_std for k in labels], label="false positive", color="#4c72b0")
        ax.bar(x + 0.2, fn, 0.4, yerr=[scores[k].fn_rate_std for k in labels], label="false negative", color="#dd8452")
        ax.set_xticks(x, labels, rotation=30, ha="right")
        ax.set_ylabel("error rate")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
    return save(fig, path)


def confidence_by_outcome(groups: Mapping[str, Sequence[float]], path: str | Path,
                          separation: SeparationResult | None = None) -> Path:
    """Box plot of confidence-in-verdict per outcome class (TP, TN, FP, FN)."""
    order = [k for k in ("TP", "TN", "FP", "FN") if groups.get(k)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        if order:
            ax.boxplot([groups[k] for k in order], tick_labels=order, showfliers=True)
        ax.set_ylabel("confidence in verdict")
        ax.set_ylim(0, 1.02)
        if separation is not None:
            ax.set_title(str(separation.test))
    return save(fig, path)


def filter_heatmap(outcome: FilterOutcome, path: str | Path) -> Path:
    """Filtered connectome coloured by provenance; prior-only edges in pink."""
    names = outcome.filtered.parcellation.names
    n = len(names)
    size = min(12.0, 2.0 + 0.12 * n)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(size, size))
        ax.imshow(outcome.provenance, cmap=ListedColormap(PROVENANCE_COLOURS), vmin=0, vmax=3,
                  interpolation="nearest")
        if n <= 80:
            fs = max(3, min(8, 400 // max(n, 1)))
            ax.set_xticks(range(n), names, rotation=90, fontsize=fs)
            ax.set_yticks(range(n), names, fontsize=fs)
        ax.set_title(f"{outcome.n_added_by_llm} edges added by prior (cutoff {outcome.cutoff:g})")
        handles = [plt.Rectangle((0, 0), 1, 1, color=PROVENANCE_COLOURS[p]) for p in
                   (Provenance.MICROSTRUCTURE_ONLY, Provenance.LLM_ONLY, Provenance.BOTH)]
        ax.legend(handles, ["microstructure only", "prior only", "both"], loc="upper left",
                  bbox_to_anchor=(1.01, 1.0), frameon=False)
    return save(fig, path)


def fit_scatter(fits: Mapping[str, DiffusionFit], target: RegionalVector, path: str | Path) -> Path:
    """Rescaled model prediction against the target over the fitted regions, one panel per connectome."""
    keys = list(fits)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.0 * len(keys), 3.0), squeeze=False)
        y = target.values[target.mask]
        for ax, k in zip(axes[0], keys):
            f = fits[k]
            p = f.scale * f.prediction[target.mask]
            ax.scatter(p, y, s=10, color="#4c72b0")
            lo, hi = float(min(p.min(), y.min())), float(max(p.max(), y.max()))
            ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
            ax.set_title(f"{k}\nr = {f.r:.3f}, SSE = {f.sse:.3g}")
            ax.set_xlabel("model (rescaled)")
        axes[0][0].set_ylabel("target")
        fig.tight_layout()
    return save(fig, path)


def null_histograms(result: PermutationResult, path: str | Path) -> Path:
    """Null distributions of r and SSE with the observed value marked."""
    with plt.rc_context(STYLE):
        fig, (ax_r, ax_s) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for ax, null, obs, p, name in (
            (ax_r, result.null_r, result.observed_r, result.p_r, "r"),
            (ax_s, result.null_sse, result.observed_sse, result.p_sse, "SSE"),
        ):
            vals = null[np.isfinite(null)]
            if len(vals):
                ax.hist(vals, bins=30, color="0.7")
            ax.axvline(obs, color="#e377c2", lw=1.5)
            ax.set_xlabel(name)
            ax.set_title(f"p = {p:.3g} ({result.trials} trials)")
        ax_r.set_ylabel("count")
        fig.tight_layout()
    return save(fig, path)
