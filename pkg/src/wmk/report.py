"""Figure rendering for benchmark tables and training logs.

Figures are written as PNGs next to the delimited reports. PNG metadata is
pinned so repeated runs produce stable bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "wmk"}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def render_bench_figures(table, outdir) -> list:
    """Accuracy bars and sync-error curves for a BenchTable; returns paths."""
    paths = []
    conds = table.condition_names
    xs = np.arange(len(conds))

    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(conds), 4.0))
    width = 0.8 / max(1, len(table.range_names))
    for i, rn in enumerate(table.range_names):
        accs = [100.0 * table.reports[(rn, cn)].mean_acc for cn in conds]
        ax.bar(xs + i * width, accs, width, label=rn)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(conds, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("bit accuracy (%)")
    ax.set_ylim(40, 101)
    ax.axhline(95.0, color="gray", lw=0.8, ls="--")
    ax.legend(fontsize=7)
    ax.set_title("decoding accuracy by condition")
    fig.tight_layout()
    p = str(outdir) + "/bench_accuracy.png"
    _save(fig, p)
    paths.append(p)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for rn in table.range_names:
        ax1.plot(xs, [table.reports[(rn, cn)].median_offset_err for cn in conds], marker="o", label=rn)
        ax2.plot(xs, [table.reports[(rn, cn)].median_scale_err for cn in conds], marker="s", label=rn)
    for ax, lab in ((ax1, "median offset error (px)"), (ax2, "median scale error")):
        ax.set_xticks(xs)
        ax.set_xticklabels(conds, rotation=20, ha="right", fontsize=7)
        ax.set_ylabel(lab)
        ax.grid(alpha=0.3)
    ax1.legend(fontsize=7)
    fig.tight_layout()
    p = str(outdir) + "/bench_sync_error.png"
    _save(fig, p)
    paths.append(p)
    return paths


def render_training_curves(log_rows, path) -> None:
    """Loss components and batch accuracy against the step counter."""
    steps = [int(r[0]) for r in log_rows]
    img = [float(r[1]) for r in log_rows]
    msg = [float(r[2]) for r in log_rows]
    acc = [float(r[3]) for r in log_rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(steps, msg, label="message loss")
    ax1.plot(steps, img, label="image loss")
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(steps, acc, color="tab:green")
    ax2.set_xlabel("step")
    ax2.set_ylabel("train-batch bit accuracy")
    ax2.set_ylim(0.4, 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
