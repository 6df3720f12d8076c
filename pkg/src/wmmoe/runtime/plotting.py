"""PNG figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(rows: Sequence[dict], path: str | Path) -> None:
    rows = [r for r in rows if r["epoch"] > 0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["loss"] for r in rows], marker="o", label="train loss")
    val = [r.get("val_minade", float("nan")) for r in rows]
    if np.isfinite(val).any():
        ax2 = ax.twinx()
        ax2.plot(ep, val, color="tab:orange", marker="s", label="val minADE")
        ax2.set_ylabel("val minADE (m)")
        ax2.legend(loc="upper center")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_class_metrics(class_rows: Sequence[dict], path: str | Path, metric: str = "minADE") -> None:
    rows = [r for r in class_rows if r["metric"] == metric]
    gs = sorted({r["g"] for r in rows})
    classes = list(dict.fromkeys(r["scenario"] for r in rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(classes)), 3.5))
    width = 0.8 / max(len(gs), 1)
    for j, g in enumerate(gs):
        vals = [next((r["value"] for r in rows if r["scenario"] == c and r["g"] == g), np.nan) for c in classes]
        ax.bar(np.arange(len(classes)) + j * width, vals, width, label=f"g={g}")
    ax.set_xticks(np.arange(len(classes)) + width * (len(gs) - 1) / 2)
    ax.set_xticklabels(classes, rotation=20)
    ax.set_ylabel(f"{metric} (m)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_route_heatmap(route_rows: Sequence[dict], path: str | Path) -> None:
    blocks = sorted({r["block"] for r in route_rows})
    experts = sorted({r["expert"] for r in route_rows})
    classes = list(dict.fromkeys(r["scenario"] for r in route_rows))
    fig, axes = plt.subplots(1, len(blocks), figsize=(2.2 + 2.2 * len(blocks), 0.6 * len(classes) + 1.6),
                             squeeze=False, layout="constrained")
    for ax, b in zip(axes[0], blocks):
        grid = np.zeros((len(classes), len(experts)))
        for r in route_rows:
            if r["block"] == b:
                grid[classes.index(r["scenario"]), experts.index(r["expert"])] = r["mean_weight"]
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_title(f"block {b}")
        ax.set_xticks(range(len(experts)))
        ax.set_xlabel("expert")
        ax.set_yticks(range(len(classes)))
        ax.set_yticklabels(classes if b == blocks[0] else [])
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="mean gate weight")
    fig.savefig(path, dpi=110)
    plt.close(fig)
