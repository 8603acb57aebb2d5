"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_missing_rates(stats, path):
    """Mean missing rate per variable, with the across-sequence std as error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(stats.variables) + 2), 3.2))
        x = np.arange(len(stats.variables))
        ax.bar(x, stats.missing_mean, yerr=stats.missing_std, color="#4c72b0", capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(stats.variables, rotation=45 if len(x) > 8 else 0, ha="right" if len(x) > 8 else "center")
        ax.set_ylim(0, 1)
        ax.set_ylabel("missing rate")
        ax.set_title("missing rate per variable")
        fig.tight_layout()
        return _save(fig, path)


def plot_interval_histogram(stats, path):
    """Bucketed counts of the gaps between adjacent records."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        buckets = sorted(stats.interval_hist)
        counts = [stats.interval_hist[b] for b in buckets]
        ax.bar(buckets, counts, width=0.8 * stats.bucket_width, color="#55a868")
        ax.set_yscale("log" if counts and max(counts) > 50 * max(1, min(counts)) else "linear")
        ax.set_xlabel("interval (h)")
        ax.set_ylabel("count")
        ax.set_title(f"time intervals (n={stats.n_pairs})")
        fig.tight_layout()
        return _save(fig, path)


def plot_experiment(result, path):
    """Grouped bars of macro AUROC: one group per condition, one bar per variant."""
    grid = result.grid if hasattr(result, "grid") else result["grid"]
    variants = list(dict.fromkeys(r["variant"] for r in grid))
    conditions = list(dict.fromkeys(r["condition"] for r in grid))
    lookup = {(r["variant"], r["condition"]): r["macro_auroc"] for r in grid}
    width = 0.8 / max(1, len(variants))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(conditions) + 2), 3.4))
        x = np.arange(len(conditions))
        for i, v in enumerate(variants):
            vals = [lookup.get((v, c)) for c in conditions]
            heights = [np.nan if val is None else val for val in vals]
            ax.bar(x + (i - (len(variants) - 1) / 2) * width, heights, width, label=v)
            for j, val in enumerate(vals):
                if val is None:
                    ax.text(x[j] + (i - (len(variants) - 1) / 2) * width, 0.02, "failed",
                            rotation=90, ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x)
        ax.set_xticklabels(conditions)
        finite = [v for v in lookup.values() if v is not None]
        lo = min(finite) if finite else 0.5
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        ax.set_ylabel("macro AUROC")
        ax.legend(fontsize=7, ncol=min(3, len(variants)))
        fig.tight_layout()
        return _save(fig, path)
