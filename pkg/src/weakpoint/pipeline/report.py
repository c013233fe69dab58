"""Figures written next to the delimited/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 110, "bbox_inches": "tight", "metadata": {"Software": None}}


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_loss_curve(epoch_loss: Sequence[float], path, path_loss: Sequence[dict] | None = None, title: str = "training loss"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(len(epoch_loss))
    ax.plot(epochs, epoch_loss, color="k", lw=1.8, label="total")
    if path_loss:
        for name in path_loss[0]:
            ax.plot(epochs, [p[name] for p in path_loss], lw=1, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8, frameon=False)
    return _finish(fig, path)


def plot_class_iou(iou: Sequence[float | None], names: Sequence[str], path, title: str = "per-class IoU"):
    vals = [np.nan if v is None else v for v in iou]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(vals) + 1), 3.5))
    ax.bar(np.arange(len(vals)), np.nan_to_num(vals), color="#4c72b0")
    ax.set_xticks(np.arange(len(vals)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    finite = [v for v in vals if not np.isnan(v)]
    if finite:
        ax.axhline(np.mean(finite), color="k", ls="--", lw=1)
    ax.set_title(title)
    return _finish(fig, path)


def plot_ablation(rows: Sequence[dict], path):
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(rows) + 1), 3.5))
    miou = [r["miou"] for r in rows]
    colors = ["#dd8452" if r["fusion"] == "sum" else "#4c72b0" for r in rows]
    ax.bar(np.arange(len(rows)), miou, color=colors)
    ax.set_xticks(np.arange(len(rows)), [r["setting"] for r in rows], rotation=35, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("pseudo-label mIoU")
    return _finish(fig, path)


def plot_class_frequencies(scene_freq, subcloud_freq, names: Sequence[str], path):
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(names) + 1), 3.5))
    x = np.arange(len(names))
    ax.bar(x - 0.2, np.asarray(scene_freq) * 100, width=0.4, label="scene labels")
    ax.bar(x + 0.2, np.asarray(subcloud_freq) * 100, width=0.4, label="subcloud labels")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("class frequency (%)")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)
