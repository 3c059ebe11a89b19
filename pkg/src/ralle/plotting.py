"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=120, bbox_inches="tight", metadata={"Software": None})


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_wer(rows: Sequence, path: str | Path) -> Path:
    """Grouped bars of WER and WER-R per system, one panel per split."""
    splits = sorted({r.split for r in rows})
    fig, axes = plt.subplots(1, len(splits), figsize=(4.5 * len(splits), 3.2), squeeze=False)
    for ax, split in zip(axes[0], splits):
        sub = [r for r in rows if r.split == split]
        x = np.arange(len(sub))
        ax.bar(x - 0.2, [r.wer for r in sub], 0.4, label="WER")
        ax.bar(x + 0.2, [r.wer_r for r in sub], 0.4, label="WER-R")
        ax.set_xticks(x, [r.system for r in sub], rotation=30, ha="right")
        ax.set_ylabel("%")
        ax.set_title(split)
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_error_types(rows: Sequence, path: str | Path) -> Path:
    """Stacked counts of the four error types (best-of-N sample) per system and split."""
    from .evaluate import ERROR_TYPES

    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(rows) + 1), 3.2))
    labels = [f"{r.system}\n{r.split}" for r in rows]
    bottom = np.zeros(len(rows))
    for t in ERROR_TYPES:
        v = np.array([getattr(r, t) for r in rows], dtype=float)
        ax.bar(labels, v, bottom=bottom, label=t)
        bottom += v
    ax.set_ylabel("utterances")
    ax.tick_params(axis="x", labelsize=7)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_sweep(grid: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """WER against window size, one line per sampling setting; ``grid[setting][k] = wer``."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for setting in sorted(grid):
        ks = list(grid[setting])
        ax.plot(range(len(ks)), [grid[setting][k] for k in ks], marker="o", label=setting)
        ax.set_xticks(range(len(ks)), ks)
    ax.set_xlabel("k")
    ax.set_ylabel("WER %")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_mask(per_head: np.ndarray, path: str | Path, titles: Sequence[str] | None = None) -> Path:
    """One heat map per attention head (rows = queries, columns = keys)."""
    H = per_head.shape[0]
    fig, axes = plt.subplots(1, H, figsize=(3 * H, 3), squeeze=False)
    for h, ax in enumerate(axes[0]):
        ax.imshow(per_head[h], cmap="Greys", interpolation="nearest")
        ax.set_title(titles[h] if titles else f"head {h}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
