"""Figures written next to the JSON/text reports."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from refseg.metrics import PR_THRESHOLDS, TABLE_COLUMNS, EvalReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(steps: Sequence[dict], evals: Sequence[dict], path: str | Path) -> Path:
    """Loss and learning rate per step, val gIoU per epoch."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        x = [s["step"] for s in steps]
        axes[0].plot(x, [s["loss"] for s in steps], lw=0.8)
        axes[0].set_yscale("log")
        axes[0].set(xlabel="step", ylabel="BCE loss")
        axes[1].plot(x, [s["lr"] for s in steps], lw=0.8, color="C1")
        axes[1].set(xlabel="step", ylabel="learning rate")
        scored = [e for e in evals if "giou" in e]
        axes[2].plot([e["epoch"] for e in scored], [e["giou"] for e in scored], marker="o", ms=3, color="C2")
        axes[2].set(xlabel="epoch", ylabel="val gIoU", ylim=(0, 1))
        return _save(fig, path)


def plot_eval(report: EvalReport, path: str | Path, title: str = "") -> Path:
    """Precision-at-threshold curve and the per-image IoU histogram."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7, 3))
        ts = np.linspace(0.05, 0.95, 19)
        ious = np.asarray(report.per_image_iou)
        ax0.plot(ts, [100 * (ious >= t).mean() for t in ts], color="0.4", lw=0.8)
        ax0.plot(PR_THRESHOLDS, [report.pr[t] for t in PR_THRESHOLDS], "o", color="C0", ms=4)
        ax0.set(xlabel="IoU threshold", ylabel="Pr@X (%)", ylim=(0, 102))
        ax1.hist(ious, bins=20, range=(0, 1), color="C0", alpha=0.8)
        ax1.axvline(report.giou, color="C3", ls="--", lw=1, label=f"gIoU {report.giou:.3f}")
        ax1.axvline(report.ciou, color="C2", ls=":", lw=1, label=f"cIoU {report.ciou:.3f}")
        ax1.set(xlabel="per-image IoU", ylabel="count")
        ax1.legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_ablation(blocks: Sequence[tuple[str, Sequence[str], Sequence[Sequence[float]]]], path: str | Path) -> Path:
    """One panel per axis: gIoU and cIoU bars for each setting."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(blocks), figsize=(3 * len(blocks), 2.8), squeeze=False)
        gi, ci = TABLE_COLUMNS.index("gIoU"), TABLE_COLUMNS.index("cIoU")
        for ax, (axis, labels, rows) in zip(axes[0], blocks):
            x = np.arange(len(labels))
            ax.bar(x - 0.2, [r[gi] for r in rows], 0.4, label="gIoU")
            ax.bar(x + 0.2, [r[ci] for r in rows], 0.4, label="cIoU")
            ax.set_xticks(x, labels)
            ax.set(title=axis, ylim=(0, 100))
        axes[0][0].set_ylabel("%")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)


def save_heatmap(values: np.ndarray, path: str | Path, title: str = "dense prompt") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3))
        im = ax.imshow(values, cmap="magma")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_axis_off()
        ax.set_title(title)
        return _save(fig, path)
