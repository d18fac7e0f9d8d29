"""PNG figures for CLI reports (matplotlib, headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def heatmap_png(matrix, row_labels, col_labels, path, title: str = "") -> Path:
    """Darker is higher, same convention as the PGM/SVG exports."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    h, w = m.shape
    fig, ax = plt.subplots(figsize=(max(4.0, 0.28 * w + 2.5), max(3.0, 0.22 * h + 1.5)))
    im = ax.imshow(m, cmap="Greys", aspect="auto", interpolation="nearest")
    ax.set_xticks(range(w), labels=list(col_labels), rotation=90, fontsize=6)
    ax.set_yticks(range(h), labels=list(row_labels), fontsize=6)
    ax.set_xlabel("key token")
    ax.set_ylabel("query token")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def training_curves_png(log, path, title: str = "") -> Path:
    """Loss (left axis, log scale) and validation accuracies (right axis) per epoch."""
    epochs = [r["epoch"] for r in log.rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [max(r["loss"], 1e-12) for r in log.rows], color="black", label="train loss")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    acc = ax.twinx()
    for col in log.COLUMNS[2:]:
        vals = [r.get(col) for r in log.rows]
        if any(v is not None for v in vals):
            acc.plot(epochs, [np.nan if v is None else v for v in vals], marker=".", label=col)
    acc.set_ylim(-0.02, 1.02)
    acc.set_ylabel("validation accuracy")
    if log.best_epoch > 0:
        ax.axvline(log.best_epoch, color="grey", linestyle=":", linewidth=1)
    lines = ax.get_legend_handles_labels()
    more = acc.get_legend_handles_labels()
    acc.legend(lines[0] + more[0], lines[1] + more[1], fontsize=7, loc="center right")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def accuracy_bars_png(rows, path, title: str = "") -> Path:
    """Grouped bars: one group per run label, one bar per split; reference values as ticks."""
    labels = [r["label"] for r in rows]
    splits = [s for s in ("R", "A1", "A2", "A3", "A4") if any(s in r["ours"] for r in rows)]
    x = np.arange(len(labels))
    width = 0.8 / max(len(splits), 1)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.6 * len(labels)), 3.5))
    for k, s in enumerate(splits):
        ours = [100 * r["ours"].get(s, np.nan) for r in rows]
        pos = x + (k - (len(splits) - 1) / 2) * width
        ax.bar(pos, ours, width, label=s)
        ref = [r.get("reference", {}).get(s, np.nan) for r in rows]
        ax.scatter(pos, ref, marker="_", color="black", s=80, zorder=3)
    ax.set_xticks(x, labels=labels, fontsize=7)
    ax.set_ylim(0, 105)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=7, ncol=len(splits))
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
