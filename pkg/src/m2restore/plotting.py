"""Report figures (PNG, non-interactive backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(metrics_csv, out_png) -> Path:
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    step = np.array([int(r["step"]) for r in rows])
    l1 = np.array([float(r["l1"]) for r in rows])
    bal = np.array([float(r["balance"]) for r in rows])
    usage_keys = [k for k in rows[0] if k.startswith("usage_")] if rows else []
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        axes[0].plot(step, l1, lw=0.6, color="0.6")
        if len(l1) >= 20:
            k = max(len(l1) // 50, 5)
            axes[0].plot(step[k - 1:], np.convolve(l1, np.ones(k) / k, mode="valid"), color="C0")
        axes[0].set(xlabel="step", ylabel="L1", title="reconstruction loss")
        axes[1].plot(step, bal, color="C1", lw=0.8)
        axes[1].set(xlabel="step", ylabel="CV$^2$ sum", title="balance loss")
        if usage_keys:
            U = np.array([[float(r[k]) for k in usage_keys] for r in rows])
            frac = U / np.maximum(U.sum(axis=1, keepdims=True), 1)
            axes[2].stackplot(step, frac.T, labels=[k.split("_")[1] for k in usage_keys])
            axes[2].set(xlabel="step", ylabel="share of selections", title="expert usage", ylim=(0, 1))
            axes[2].legend(title="expert", loc="upper right", ncol=2)
        return _save(fig, out_png)


def eval_bars(rows, out_png) -> Path:
    kinds = [r.kind for r in rows]
    x = np.arange(len(kinds))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(x - 0.2, [r.input_psnr for r in rows], 0.4, label="degraded input", color="0.7")
        ax.bar(x + 0.2, [r.psnr for r in rows], 0.4, label="restored", color="C0")
        ax.set_xticks(x, kinds)
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, out_png)


def usage_histogram(usage, out_png, title: str = "expert usage") -> Path:
    usage = np.asarray(usage)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(np.arange(len(usage)), usage, color="C2")
        ax.set(xlabel="expert", ylabel="selected pixels", title=title)
        ax.set_xticks(np.arange(len(usage)))
        return _save(fig, out_png)


def cosine_heatmap(matrix, labels, out_png) -> Path:
    M = np.asarray(matrix)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(M, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(len(labels)), labels)
        ax.set_yticks(range(len(labels)), labels)
        for i in range(len(labels)):
            for j in range(len(labels)):
                ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", fontsize=8)
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title("routing centroid cosine")
        return _save(fig, out_png)
