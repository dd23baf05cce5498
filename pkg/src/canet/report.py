"""Matplotlib figure rendering for run reports.

Every subcommand that writes a delimited report also renders a figure next
to it (training curves, per-layer cost bars, benchmark timings, gradient
check errors, confusion matrix).  The Agg backend keeps rendering headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def save_training_curves(rows, path) -> None:
    epochs = [r.epoch for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.train_loss for r in rows], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [r.train_top1 for r in rows], label="train top-1")
    ax_acc.plot(epochs, [r.val_top1 for r in rows], label="val top-1")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_cost_figure(cost_report, path, top: int = 20) -> None:
    """Horizontal bars of the heaviest layers by multiply-accumulates."""
    entries = sorted(cost_report.entries, key=lambda e: e.macs, reverse=True)[:top]
    entries = entries[::-1]
    names = [e.name for e in entries]
    macs = np.array([e.macs for e in entries], dtype=float) / 1e9
    fig, ax = plt.subplots(figsize=(7, 0.3 * len(entries) + 1.5))
    ax.barh(names, macs, color="tab:blue")
    ax.set_xlabel("GMACs per clip")
    ax.set_title(f"{cost_report.spec_name}: {cost_report.total_params / 1e6:.1f}M params, "
                 f"{cost_report.total_macs / 1e9:.1f}G MACs at T={cost_report.frames}")
    ax.tick_params(axis="y", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_bench_figure(rows, path) -> None:
    """rows: (kernel, dims, median_ms)."""
    names = [f"{name} {dims}" for name, dims, _ in rows][::-1]
    times = [ms for _, _, ms in rows][::-1]
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(rows) + 1.5))
    ax.barh(names, times, color="tab:green", log=True)
    ax.set_xlabel("median wall time (ms, log scale)")
    ax.tick_params(axis="y", labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_gradcheck_figure(results: dict, tolerance: float, path) -> None:
    names = list(results)
    # Floor at 1e-17 so exact-zero errors stay drawable on the log axis.
    errs = [max(results[n], 1e-17) for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.5))
    colors = ["tab:blue" if e <= tolerance else "tab:red" for e in errs]
    ax.barh(names[::-1], errs[::-1], color=colors[::-1], log=True)
    ax.axvline(tolerance, color="black", linestyle="--", linewidth=1,
               label=f"tolerance {tolerance:g}")
    ax.set_xlabel("max relative gradient error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_confusion_matrix(confusion: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    k = confusion.shape[0]
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
