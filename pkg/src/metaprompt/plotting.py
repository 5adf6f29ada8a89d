"""Figures rendered to files next to the CSV/JSON outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_arg_bars(table: dict, path) -> Path:
    """Grouped ARG bars; ``table`` maps partition -> {method: arg or None}."""
    partitions = sorted(table)
    methods = sorted({m for row in table.values() for m in row})
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(partitions) * max(len(methods), 1) / 2), 3.2))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(partitions))
    for i, m in enumerate(methods):
        vals = [table[p].get(m) for p in partitions]
        ax.bar(x + i * width, [np.nan if v is None else v for v in vals], width, label=m)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(partitions)
    ax.set_ylabel("ARG (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sweep(series: dict, axis: str, path) -> Path:
    """One line per series; ``series`` maps label -> [(x_label, arg)] in sweep order."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label in sorted(series):
        pts = series[label]
        ax.plot(range(len(pts)), [np.nan if v is None else v for _, v in pts], marker="o", label=label)
        ax.set_xticks(range(len(pts)))
        ax.set_xticklabels([str(x) for x, _ in pts], rotation=30 if len(pts) > 5 else 0, fontsize=7)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel(axis)
    ax.set_ylabel("ARG (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_similarity_heatmap(rows, path) -> Path:
    """Heatmap of ``(task_a, task_b, score)`` triples."""
    ids = sorted({a for a, _, _ in rows} | {b for _, b, _ in rows})
    index = {t: i for i, t in enumerate(ids)}
    grid = np.full((len(ids), len(ids)), np.nan)
    for a, b, s in rows:
        grid[index[a], index[b]] = s
    size = max(3.5, 0.35 * len(ids) + 1.5)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(ids)))
    ax.set_yticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_yticklabels(ids, fontsize=6)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)
