"""Figures written next to the CSV exports (Agg backend, PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_attention_blocks(rows: list, path) -> None:
    """Stacked bars of mean attention mass per key block, one bar per layer."""
    layers = [r["layer"] for r in rows]
    mem = np.array([r["w_mem_mean"] for r in rows])
    ref = np.array([r["w_ref_mean"] for r in rows])
    own = np.array([r["w_self_mean"] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(layers, mem, label="memory")
    ax.bar(layers, ref, bottom=mem, label="reference")
    ax.bar(layers, own, bottom=mem + ref, label="current")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean attention mass")
    ax.set_ylim(0, 1.02)
    ax.set_xticks(layers)
    ax.legend(fontsize=8, loc="lower right")
    _save(fig, path)


def plot_ratios(ratios, path, history=None) -> None:
    """Per-layer stabilized selection ratios; with ``history`` (steps x L) also the curves."""
    ratios = np.asarray(ratios)
    ncols = 2 if history is not None and len(history) else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4.2 * ncols, 3.2), squeeze=False)
    ax = axes[0, 0]
    ax.bar(np.arange(len(ratios)), ratios, color="tab:green")
    ax.set_xlabel("layer")
    ax.set_ylabel("selection ratio")
    ax.set_ylim(0, 1.02)
    ax.set_xticks(np.arange(len(ratios)))
    if ncols == 2:
        h = np.asarray(history)
        ax = axes[0, 1]
        for l in range(h.shape[1]):
            ax.plot(h[:, l], lw=1, label=f"layer {l}")
        ax.set_xlabel("step")
        ax.set_ylabel("kept fraction")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_training(steps, loss, path, loss_ce=None, loss_jaccard=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, loss, lw=1, label="total")
    if loss_ce is not None:
        ax.plot(steps, loss_ce, lw=1, label="cross-entropy")
    if loss_jaccard is not None:
        ax.plot(steps, loss_jaccard, lw=1, label="soft Jaccard")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (summed over frames)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_scores(names, jf, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(names) + 2), 3.2))
    ax.bar(np.arange(len(names)), jf)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylabel("J&F")
    ax.set_ylim(0, 1.02)
    _save(fig, path)
