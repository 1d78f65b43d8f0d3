"""PPI-vs-epoch and accuracy-vs-data-fraction figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import ProbeReport  # noqa: E402


def plot_ppi_curve(report: ProbeReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, curve in report.ppi_curve.items():
        xs = [i + 1 for i, v in enumerate(curve) if v is not None]
        ax.plot(xs, [v for v in curve if v is not None], marker=".", label=key)
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("probe epoch")
    ax.set_ylabel("PPI")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_fraction_sweep(report: ProbeReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dom, sweep in report.sweep.items():
        fr = sorted(sweep, key=float)
        ax.plot([float(f) for f in fr], [sweep[f] for f in fr], marker="o", label=f"{dom} (locked)")
        if dom in report.scratch:
            ax.axhline(report.scratch[dom], ls="--", lw=0.8, label=f"{dom} scratch")
    ax.set_xlabel("attacker data fraction")
    ax.set_ylabel("target accuracy")
    ax.set_ylim(0, 1)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
