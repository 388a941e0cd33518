"""Figures written next to CLI reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _tidy(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.get_xaxis().tick_bottom()
    ax.get_yaxis().tick_left()


def plot_bench(report, path):
    """Grouped bars of mean latency (ms) with std error bars, one group per shape/q."""
    keys = sorted({(r.shape, r.q) for r in report.rows}, key=lambda t: (t[0], t[1]))
    formats = sorted({r.format for r in report.rows})
    width = 0.8 / max(len(formats), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(keys), 3.6))
    for i, fmt in enumerate(formats):
        by_key = {(r.shape, r.q): r for r in report.rows if r.format == fmt}
        xs = np.arange(len(keys)) + i * width
        means = [by_key[k].mean_s * 1e3 if k in by_key else np.nan for k in keys]
        stds = [by_key[k].std_s * 1e3 if k in by_key else 0.0 for k in keys]
        ax.bar(xs, means, width, yerr=stds, capsize=3, label=fmt)
    ax.set_xticks(np.arange(len(keys)) + width * (len(formats) - 1) / 2)
    ax.set_xticklabels([f"{s}\nq={q}" for s, q in keys], fontsize=8)
    ax.set_ylabel("latency (ms)")
    ax.legend(frameon=False)
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_histogram(reference, approx, path, bins: int = 80):
    """Histogram of elementwise reconstruction error."""
    err = (np.asarray(approx, np.float64) - np.asarray(reference, np.float64)).ravel()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(err, bins=bins, color="0.35")
    ax.set_xlabel("dequantized - reference")
    ax.set_ylabel("count")
    ax.set_yscale("log")
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
