"""Figure rendering for run outputs; written next to the delimited files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .baseline import BaselineModel
from .harness import LABEL_VARIANTS, METRIC_NAMES, PROPOSAL_NAMES, SelectionSummary


def render_roc(model: BaselineModel, path: Path | str) -> None:
    """ROC curve of the fitted threshold model with its operating point."""
    points = sorted(model.roc, key=lambda p: (p[0], p[1]))
    fpr = [0.0] + [p[0] for p in points] + [1.0]
    tpr = [0.0] + [p[1] for p in points] + [1.0]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, marker=".", label=f"AUC = {model.auc:.3f}")
    op = next((p for p in model.roc if p[2] == model.theta), None)
    if op is not None:
        ax.plot([op[0]], [op[1]], "o", color="crimson", label=f"operating point (theta={model.theta:.2f})")
    ax.plot([0, 1], [0, 1], "--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"threshold grid ROC (s_d = {model.s_d})")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ssim_history(history: list[float], path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(2, len(history) + 2), history, marker="o")
    ax.axhline(0.8, color="crimson", linestyle="--", linewidth=0.8, label="stop mean bound")
    ax.set_xlabel("training window")
    ax.set_ylabel("gram SSIM vs previous window")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_segmentation_metrics(table: dict, path: Path | str) -> None:
    """Grouped bars of every metric per (label variant, proposal)."""
    groups = [(label, prop) for label in LABEL_VARIANTS for prop in PROPOSAL_NAMES]
    x = np.arange(len(groups))
    width = 0.15
    fig, ax = plt.subplots(figsize=(10, 4))
    for offset, metric in enumerate(METRIC_NAMES):
        vals = [table[label][prop][metric] for label, prop in groups]
        ax.bar(x + (offset - 2) * width, vals, width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{label}\n{prop}" for label, prop in groups], fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean over test images")
    ax.legend(ncol=len(METRIC_NAMES), loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_rcap_trend(results: dict[int, SelectionSummary], path: Path | str) -> None:
    kappas = sorted(results)
    acc = [results[k].mean_accuracy for k in kappas]
    std = [results[k].std_accuracy or 0.0 for k in kappas]
    manual = [results[k].frac_manual for k in kappas]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(kappas, acc, yerr=std, marker="o", capsize=3, label="selection accuracy")
    ax.plot(kappas, manual, marker="s", linestyle="--", label="manual fraction")
    ax.set_xlabel("corruption iterations kappa")
    ax.set_xticks(kappas)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_selection_summary(summary: SelectionSummary, path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    choices = ["G1", "G2", "Manual"]
    fracs = [summary.frac_g1, summary.frac_g2, summary.frac_manual]
    ax.bar(choices, fracs, color=["crimson", "royalblue", "gray"])
    for i, frac in enumerate(fracs):
        ax.text(i, frac + 0.01, f"{frac:.2f}", ha="center", fontsize=9)
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("fraction of test images")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
