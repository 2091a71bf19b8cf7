"""Loss curves and metric bar charts written to image files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_t", "L_s", "L_u", "L_c")
METRICS = (("dice", "Dice (%)"), ("miou", "mIoU (%)"), ("pd", "Pd (%)"), ("fa", "Fa (1e-4)"))


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3, lw=0.5)


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def smooth(values, window: int):
    v = np.asarray(values, dtype=float)
    if window <= 1 or len(v) < window:
        return v
    kernel = np.ones(window) / window
    # valid part only, padded at the front with the running mean
    head = np.cumsum(v[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(v, kernel, mode="valid")])


def plot_losses(records, out_path, title=None, window: int = 25):
    """Training loss components and the consistency weight against iteration."""
    if not records:
        raise ValueError("no loss records to plot")
    t = [r["t"] for r in records]
    fig, (ax, ax_w) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for key in LOSS_KEYS:
        vals = [r.get(key, 0.0) for r in records]
        if any(vals):
            ax.plot(t, smooth(vals, window), lw=1.2, label=key)
    ax.set_ylabel("loss")
    ax.legend(frameon=False, ncol=4, fontsize=8)
    _style(ax)
    ax_w.plot(t, [r.get("lambda_c", 0.0) for r in records], color="k", lw=1)
    ax_w.set_ylabel("lambda_c")
    ax_w.set_xlabel("iteration")
    _style(ax_w)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_val_curves(curves: dict, out_path, title=None):
    """``{label: [{"t":..., "val_dice":...}, ...]}`` on one axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, recs in curves.items():
        if recs:
            ax.plot([r["t"] for r in recs], [r["val_dice"] for r in recs], marker="o", ms=3, lw=1.2, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation Dice (%)")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_metric_bars(rows: dict, out_path, title=None):
    """Grouped bars: one group per category, one bar per run.

    ``rows`` maps run name to ``{category: {dice, miou, pd, fa}}``.
    """
    if not rows:
        raise ValueError("nothing to plot")
    runs = list(rows)
    cats = list(next(iter(rows.values())))
    fig, axes = plt.subplots(1, len(METRICS), figsize=(3.2 * len(METRICS), 3.4))
    width = 0.8 / len(runs)
    x = np.arange(len(cats))
    for ax, (key, label) in zip(axes, METRICS):
        for i, run in enumerate(runs):
            vals = [rows[run].get(c, {}).get(key, np.nan) for c in cats]
            ax.bar(x + (i - (len(runs) - 1) / 2) * width, vals, width, label=run)
        ax.set_xticks(x)
        ax.set_xticklabels(cats, rotation=30, fontsize=8)
        ax.set_title(label, fontsize=10)
        _style(ax)
    axes[0].legend(frameon=False, fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
