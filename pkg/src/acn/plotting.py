"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SUBREGIONS  # noqa: E402

REGION_COLORS = {"ET": "#d62728", "TC": "#ff7f0e", "WT": "#1f77b4"}

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_metric_history(history: Sequence[dict], path: str | Path) -> Path:
    """DSC and HD95 per subregion against epoch."""
    fig, (ax_d, ax_h) = plt.subplots(1, 2, figsize=(7.0, 2.8))
    epochs = [e["epoch"] for e in history]
    for region in SUBREGIONS:
        c = REGION_COLORS[region]
        ax_d.plot(epochs, [e[f"{region}_dsc"] for e in history], "o-", ms=3, color=c, label=region)
        ax_h.plot(epochs, [e[f"{region}_hd95"] for e in history], "o-", ms=3, color=c, label=region)
    ax_d.set(xlabel="epoch", ylabel="DSC", ylim=(0, 1.02))
    ax_h.set(xlabel="epoch", ylabel="HD95 (mm)")
    ax_d.legend(frameon=False)
    return _save(fig, path)


def plot_subset_report(rows: Sequence[dict], path: str | Path) -> Path:
    """Grouped DSC bars per modality subset; absent subsets are left blank."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(rows) + 1.5), 3.0))
    x = np.arange(len(rows))
    width = 0.27
    for j, region in enumerate(SUBREGIONS):
        vals = [r.get(f"{region}_dsc", np.nan) if r.get("status") == "ok" else np.nan for r in rows]
        ax.bar(x + (j - 1) * width, vals, width, color=REGION_COLORS[region], label=region)
    ax.set_xticks(x)
    ax.set_xticklabels([r["modalities"] for r in rows], rotation=60, ha="right")
    ax.set(ylabel="DSC", ylim=(0, 1.02))
    ax.legend(frameon=False, ncol=3, loc="upper left")
    return _save(fig, path)
