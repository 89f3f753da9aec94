"""Optional PNG charts of the per-tick series, rendered off-screen."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .report import MetricsReport

PANELS = (
    ("mev_cum", 1, "cumulative MEV captured"),
    ("mean_latency", 3, "mean settlement latency (ticks)"),
    ("utilization", 4, "vault utilization"),
    ("share_price", 5, "LP share price"),
)


def render_series(reports: Sequence[MetricsReport], path: Path) -> Path:
    """One 2x2 panel figure, one line per report (labelled by mode)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for ax, (name, col, title) in zip(axes.flat, PANELS):
        for r in reports:
            ticks = [row[0] for row in r.series]
            ax.plot(ticks, [float(row[col]) for row in r.series], label=r.mode, linewidth=1)
        ax.set_title(title, fontsize=9)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("tick")
    if len(reports) > 1:
        axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    # a fixed metadata dict keeps the PNG bytes stable between runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
