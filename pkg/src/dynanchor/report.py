"""Report figures written next to the delimited outputs of each CLI command."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .detector import FitLogRow  # noqa: E402
from .evaluation import EvalResult  # noqa: E402

__all__ = ["loss_curve_figure", "ap_summary_figure", "search_trace_figure"]


def loss_curve_figure(rows: Sequence[FitLogRow], path) -> Path:
    steps = [r.step for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r.loss for r in rows], label="total", lw=1.5)
    ax.plot(steps, [r.cls_loss for r in rows], label="classification", lw=1.0)
    ax.plot(steps, [r.reg_loss for r in rows], label="regression", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def ap_summary_figure(result: EvalResult, path,
                      class_names: Sequence[str] | None = None) -> Path:
    classes = sorted(result.per_class)
    names = [class_names[c] if class_names and c < len(class_names)
             else f"class {c}" for c in classes]
    ap50 = [result.per_class[c].get(0.5, 0.0) for c in classes]
    ap75 = [result.per_class[c].get(0.75, 0.0) for c in classes]
    mean = [float(np.mean(list(result.per_class[c].values()))) for c in classes]

    x = np.arange(len(classes))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(classes) + 2), 3.5))
    ax.bar(x - width, ap50, width, label="AP@0.50")
    ax.bar(x, ap75, width, label="AP@0.75")
    ax.bar(x + width, mean, width, label="mean over IoU")
    ax.axhline(result.mmAP, color="k", ls="--", lw=1.0,
               label=f"mmAP = {result.mmAP:.3f}")
    ax.set_xticks(x, names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("average precision")
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def search_trace_figure(trace: Sequence[float], path,
                        singleton_best: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(range(len(trace)), trace, where="post", lw=1.5, label="accepted score")
    if singleton_best is not None:
        ax.axhline(singleton_best, color="gray", ls=":", lw=1.0,
                   label=f"best single anchor = {singleton_best:.3f}")
    ax.set_xlabel("search step")
    ax.set_ylabel("evaluation score")
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
