"""Figure rendering for the report path.

Each helper takes the same rows the CSV writers consume and saves a PNG
next to the delimited output.  Rendering is headless (Agg).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_breakdown_figure(rows: list[dict], path: str | Path, metric_label: str) -> None:
    """Line chart of a metric's macro mean by turn depth."""
    turns = [row["turn"] for row in rows]
    means = [row["mean"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(turns, means, marker="o")
    ax.set_xlabel("turn depth")
    ax.set_ylabel(metric_label)
    ax.set_xticks(turns)
    ax.set_ylim(bottom=0)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_attention_figure(table: dict[int, np.ndarray], path: str | Path) -> None:
    """Heatmap of mean attention per memory slot, one row per turn depth."""
    depths = sorted(table)
    if not depths:
        raise ValueError("no attention rows to plot")
    max_mem = max(len(table[d]) for d in depths)
    grid = np.full((len(depths), max_mem), np.nan)
    for row, depth in enumerate(depths):
        vec = table[depth]
        grid[row, : len(vec)] = vec
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("memory (turn it was stored at)")
    ax.set_ylabel("turn depth")
    ax.set_xticks(range(max_mem), [str(m + 1) for m in range(max_mem)])
    ax.set_yticks(range(len(depths)), [str(d) for d in depths])
    fig.colorbar(im, ax=ax, label="mean attention")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(history: list[dict], path: str | Path) -> None:
    """Training loss per epoch, with validation F1 when present."""
    epochs = [rec["epoch"] for rec in history]
    losses = [rec["loss"] for rec in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    if any("val_f1" in rec for rec in history):
        ax2 = ax.twinx()
        ax2.plot(
            [rec["epoch"] for rec in history if "val_f1" in rec],
            [rec["val_f1"] for rec in history if "val_f1" in rec],
            marker="s",
            color="tab:orange",
            label="validation F1",
        )
        ax2.set_ylabel("validation F1")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
