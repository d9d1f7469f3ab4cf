"""Static figures: ablation bars, training curves, recall curves, retrieval grids."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import load_image  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_ablation(rows, path) -> Path:
    """Grouped bars of R@1/5/10 and AP per ablation row; failed rows are hatched placeholders."""
    names = [r.name for r in rows]
    metrics = [("R@1", lambda r: r.recall_at.get(1)), ("R@5", lambda r: r.recall_at.get(5)),
               ("R@10", lambda r: r.recall_at.get(10)), ("AP", lambda r: r.ap)]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(rows)), 3.6))
    for i, (label, get) in enumerate(metrics):
        vals = [get(r) if r.status == "ok" else 0.0 for r in rows]
        ax.bar(x + (i - 1.5) * width, vals, width, label=label)
    for xi, r in zip(x, rows):
        if r.status != "ok":
            ax.bar(xi, 100, 0.8, fill=False, hatch="//", edgecolor="red")
            ax.text(xi, 50, "failed", ha="center", color="red", rotation=90)
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    ax.set_title(f"ablation: {rows[0].suite}" if rows else "ablation")
    ax.legend(ncol=4, fontsize=8, loc="lower right")
    return _save(fig, path)


def plot_training(history: Sequence[Mapping], path) -> Path:
    """Per-step loss terms and learning rate from a training log."""
    steps = [h["step"] for h in history]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for key in ("l_total", "l_cc", "l_sc"):
        ax.plot(steps, [h[key] for h in history], label=key)
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax_lr.plot(steps, [h["lr"] for h in history], color="black")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    return _save(fig, path)


def plot_recall(reports: Mapping[str, object], path, ks=(1, 5, 10)) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for name, rep in reports.items():
        ax.plot(ks, [rep.recall_at[k] for k in ks], marker="o", label=name)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_retrieval_grid(results, paths: Mapping[str, str], path, n_queries: int = 6,
                        top_k: int = 5, size: int = 96) -> Path:
    """Each row: the query then its top-K gallery hits, framed green when correct and red otherwise."""
    results = list(results)[:n_queries]
    fig, axes = plt.subplots(max(1, len(results)), top_k + 1,
                             figsize=(1.4 * (top_k + 1), 1.5 * max(1, len(results))), squeeze=False)
    for row, res in zip(axes, results):
        row[0].imshow(load_image(paths[res.query_id], size))
        row[0].set_title("query", fontsize=7)
        for ax, (gid, score) in zip(row[1:], res.ranked[:top_k]):
            ax.imshow(load_image(paths[gid], size))
            color = "green" if gid in res.true_ids else "red"
            for spine in ax.spines.values():
                spine.set_edgecolor(color)
                spine.set_linewidth(3)
            ax.set_title(f"{score:.2f}", fontsize=7)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
