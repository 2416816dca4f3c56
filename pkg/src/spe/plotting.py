"""Figures written next to evaluation reports: training curves and accuracy bars."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_SAVE_META = {"Software": None}

LOSS_KEYS = (("mean_l", "L"), ("mean_l_w", "L_w"), ("mean_l_s", "L_s"), ("mean_l_c", "L_c"))


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=_SAVE_META)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_training_curves(logs: Mapping[str, Sequence[Mapping]], path: str | os.PathLike) -> Path:
    """One panel per loss term; one line per run.

    ``logs`` maps a run label to its per-epoch records (the rows of a
    ``train_log.jsonl``).
    """
    fig, axes = plt.subplots(1, len(LOSS_KEYS), figsize=(4 * len(LOSS_KEYS), 3.2))
    for ax, (key, title) in zip(axes, LOSS_KEYS):
        for label, rows in sorted(logs.items()):
            xs = [r["epoch"] for r in rows if r.get(key) is not None]
            ys = [r[key] for r in rows if r.get(key) is not None]
            if xs:
                ax.plot(xs, ys, marker=".", label=label)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("mean batch loss")
    if logs:
        axes[-1].legend(fontsize=7, loc="best")
    fig.tight_layout()
    return _save(fig, path)


def plot_accuracy_bars(rows: Sequence[Mapping], path: str | os.PathLike, k: int = 8) -> Path:
    """Grouped bars of accuracy per model, one bar per (question set, criterion).

    Each row is ``{"label": str, "acc": {"<set> c<criterion>": float}}``.
    """
    series = sorted({name for r in rows for name in r["acc"]})
    labels = [r["label"] for r in rows]
    width = 0.8 / max(len(series), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(rows) + 1), 3.5))
    for j, name in enumerate(series):
        xs = [i + (j - (len(series) - 1) / 2) * width for i in range(len(rows))]
        ys = [100.0 * r["acc"].get(name, float("nan")) for r in rows]
        ax.bar(xs, ys, width=width, label=name)
    ax.axhline(100.0 / k, color="k", linestyle="--", linewidth=1, label=f"random ({100.0 / k:.1f}%)")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    return _save(fig, path)
