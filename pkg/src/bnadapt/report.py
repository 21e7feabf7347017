"""Figure rendering: each delimited output gets a PNG next to it.

Adaptation and pretraining metrics become loss/accuracy curves; sweep
summaries become mean +- std errorbar plots. Rendering runs headless (Agg).
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_adapt_metrics(records, path: str) -> None:
    """Loss components and target test accuracy over iterations."""
    if not records:
        return
    iters = [r.iteration for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(iters, [r.loss_total for r in records], label="total", lw=1.5)
    ax_loss.plot(iters, [r.loss_im for r in records], label="im", lw=1.0)
    ax_loss.plot(iters, [r.loss_bnm for r in records], label="bnm", lw=1.0)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    accs = [r.target_test_acc for r in records]
    if not all(math.isnan(a) for a in accs):
        ax_acc.plot(iters, accs, color="tab:green", lw=1.5)
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("target test accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_pretrain_metrics(records, path: str) -> None:
    """Cross-entropy and source test accuracy over iterations."""
    if not records:
        return
    iters = [r.iteration for r in records]
    fig, ax_loss = plt.subplots(figsize=(5.5, 3.4))
    ax_loss.plot(iters, [r.loss_ce for r in records], color="tab:blue", lw=1.5)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("cross-entropy", color="tab:blue")
    accs = [r.source_test_acc for r in records]
    if not all(math.isnan(a) for a in accs):
        ax_acc = ax_loss.twinx()
        ax_acc.plot(iters, accs, color="tab:green", lw=1.5)
        ax_acc.set_ylabel("source test accuracy", color="tab:green")
        ax_acc.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep(summary_rows, xlabel: str, path: str, logx: bool = False) -> None:
    """Errorbar plot of mean +- std accuracy per sweep point.

    ``summary_rows`` is a list of (x, mean, std); NaN cells are skipped.
    """
    rows = [r for r in summary_rows if not math.isnan(r[1])]
    if not rows:
        return
    rows.sort(key=lambda r: r[0])
    xs = [r[0] for r in rows]
    means = [r[1] for r in rows]
    stds = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.errorbar(xs, means, yerr=stds, fmt="o-", capsize=3, lw=1.2)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("target test accuracy")
    ax.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
