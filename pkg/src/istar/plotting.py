"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(records, path, window: int = 20) -> Path:
    """Training L1 loss per step with a running mean overlay."""
    steps = np.array([r.step for r in records])
    loss = np.array([r.loss for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, color="0.6", label="step")
    if loss.size >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.5, color="C0", label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _finish(fig, path)


def plot_eval(report, baseline, path) -> Path:
    """Per-image PSNR of the model against the bicubic baseline."""
    x = np.arange(len(report.names))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(x) + 2), 3.5))
    ax.bar(x - 0.2, baseline.psnr, 0.4, label=f"bicubic ({baseline.mean_psnr:.2f} dB)", color="0.7")
    ax.bar(x + 0.2, report.psnr, 0.4, label=f"model ({report.mean_psnr:.2f} dB)", color="C0")
    ax.set_xticks(x)
    ax.set_xticklabels(report.names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(f"PSNR {report.mode} (dB)")
    lo = min(min(report.psnr), min(baseline.psnr))
    ax.set_ylim(bottom=max(0.0, lo - 3))
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_objective(trace, path) -> Path:
    """ISTA objective gap to the final value, log scale."""
    obj = np.asarray(trace.objectives)
    gap = obj - obj[-1]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    k = np.arange(obj.size)
    pos = gap > 0
    ax.semilogy(k[pos], gap[pos], lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("F(x_k) - F(x_final)")
    ax.set_title(f"{trace.iterations} iterations, alpha = {trace.alpha:.3g}", fontsize=9)
    return _finish(fig, path)
