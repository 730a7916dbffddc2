"""Matplotlib renderings written next to each delimited report.

Every figure uses the Agg backend and strips the writer metadata so that
re-running a command reproduces the PNG byte for byte.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .model import BLOCK_ROLES
from .ranking import LayerRanking, select_top_fraction

_SAVE_KWARGS = dict(dpi=150, metadata={"Software": None})


def _save(fig, path) -> None:
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def score_heatmap(ranking: LayerRanking, path, p: float = 0.75) -> None:
    """Blocks on the x-axis, layer roles on the y-axis, colored by score."""
    scores = ranking.scores()
    blocks = sorted({lid.block for lid in scores if not lid.is_head})
    grid = np.full((len(BLOCK_ROLES), len(blocks) + 1), np.nan)
    for lid, s in scores.items():
        if lid.is_head:
            grid[0, -1] = s
        else:
            grid[BLOCK_ROLES.index(lid.role), blocks.index(lid.block)] = s

    important = select_top_fraction(ranking, p)
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * grid.shape[1], 4.2))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(blocks) + 1), [str(b) for b in blocks] + ["head"])
    ax.set_yticks(range(len(BLOCK_ROLES)), BLOCK_ROLES)
    ax.set_xlabel("transformer block")
    for lid in scores:
        row = 0 if lid.is_head else BLOCK_ROLES.index(lid.role)
        col = len(blocks) if lid.is_head else blocks.index(lid.block)
        if lid in important:
            ax.plot(col, row, marker="o", markersize=4, color="white", markeredgecolor="black")
    ax.set_title(f"layer importance scores (dots: top {int(p * 100)}%)")
    fig.colorbar(im, ax=ax, label="score")
    fig.tight_layout()
    _save(fig, path)


def overlap_matrix(labels: Sequence[str], matrix: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(1.6 + 0.9 * len(labels), 1.2 + 0.9 * len(labels)))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="cividis")
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.6 else "black", fontsize=8)
    ax.set_title("top-fraction overlap")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def probe_trace(trace: Sequence[tuple[int, float]], path) -> None:
    steps = [s for s, _ in trace]
    losses = [l for _, l in trace]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("probe loss")
    ax.set_title("held-out probe loss")
    fig.tight_layout()
    _save(fig, path)


def ablation_bars(rows, path) -> None:
    labels = [r.selector for r in rows]
    losses = [r.eval_loss for r in rows]
    fig, ax = plt.subplots(figsize=(1.4 + 0.8 * len(rows), 3.6))
    ax.bar(range(len(rows)), losses, color="#4878a8")
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylabel("held-out loss")
    ax.set_title("fine-tuning outcome per selector")
    fig.tight_layout()
    _save(fig, path)


def bound_trace(steps: Sequence[int], lhs: Sequence[float], rhs: Sequence[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, lhs, marker="o", ms=3, lw=1.0, label="gate-step divergence")
    ax.plot(steps, rhs, marker="s", ms=3, lw=1.0, label="estimated bound")
    positive = [v for v in list(lhs) + list(rhs) if v > 0]
    if positive and max(positive) / max(min(positive), 1e-300) > 50:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    ax.set_title("stability bound per checkpoint pair")
    fig.tight_layout()
    _save(fig, path)
