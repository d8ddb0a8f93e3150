"""Report figures: training curves, confusion matrices, selection-change rates.

Figures are written with the Agg backend and without PNG metadata so that
reruns produce identical files.
"""

import json

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

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


def size(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def moving_average(x, window):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window or window <= 1:
        return x
    return np.convolve(x, np.ones(window) / window, mode="valid")


def plot_training(lines, path, window=25):
    """Loss terms against step from metrics lines (JSON strings or dicts)."""
    recs = [json.loads(x) if isinstance(x, str) else x for x in lines]
    steps = np.array([r["step"] for r in recs])
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, figsize=size(1.0, 0.9), sharex=True)
        ssl = moving_average([r["l_ssl"] for r in recs], window)
        ax0.plot(steps[len(steps) - len(ssl):], ssl, color="k", lw=1, label="L_SSL")
        ax0.set_ylabel("SSL loss")
        names = sorted({n for r in recs for n in r["l_meta"]})
        for name in names:
            pts = [(r["step"], r["l_meta"][name]) for r in recs if name in r["l_meta"]]
            s, v = np.array(pts).T
            v = moving_average(v, window)
            ax1.plot(s[len(s) - len(v):], v, lw=1, label=f"L_META[{name}]")
        p2 = [r["step"] for r in recs if r["phase"] == 2]
        for ax in (ax0, ax1):
            if p2:
                ax.axvline(p2[0], color="0.6", lw=0.8, ls="--")
        ax1.set_xlabel("step")
        ax1.set_ylabel("triplet loss")
        if names:
            ax1.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)


def plot_confusion(report, path, normalize=True):
    cm = np.asarray(report.confusion, dtype=np.float64)
    if normalize:
        rows = cm.sum(axis=1, keepdims=True)
        cm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    k = len(report.classes)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(0.2 + 0.08 * k, 1.0))
        im = ax.imshow(cm, cmap="Blues", vmin=0.0, vmax=1.0 if normalize else None)
        ax.set_xticks(range(k), report.classes, rotation=90)
        ax.set_yticks(range(k), report.classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if k <= 12:
            for i in range(k):
                for j in range(k):
                    ax.text(j, i, f"{cm[i, j]:.2f}" if normalize else int(cm[i, j]), ha="center",
                            va="center", fontsize=6, color="w" if cm[i, j] > 0.5 * cm.max() else "k")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        return save(fig, path)


def plot_change_rate(rates, path, reference=None):
    """Per-batch selection-change rate with its mean."""
    rates = np.asarray(rates, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(1.0))
        ax.bar(np.arange(len(rates)), rates, color="0.4", width=0.8)
        ax.axhline(rates.mean() if len(rates) else 0.0, color="C3", lw=1, label=f"mean {rates.mean():.3f}")
        if reference is not None:
            ax.axhline(reference, color="C0", lw=1, ls="--", label=f"reference {reference:.2f}")
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("batch")
        ax.set_ylabel("negatives changed")
        ax.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)
