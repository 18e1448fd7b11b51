"""Report figures rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_cmc(path, curves, max_rank=20):
    """``curves`` maps a label to a CMC vector (rate at rank r in position r-1)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, rates in curves.items():
        rates = np.asarray(rates)[:max_rank]
        ax.plot(np.arange(1, len(rates) + 1), 100 * rates, marker="o", ms=3, label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_loss(path, iterations, losses, window=50):
    fig, ax = plt.subplots(figsize=(5, 4))
    losses = np.asarray(losses, dtype=float)
    ax.plot(iterations, losses, lw=0.5, alpha=0.4, label="per iteration")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(iterations[window - 1:], smooth, label=f"{window}-iteration mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_suboptimality(path, traces, n_samples=None):
    """``traces`` maps a variant name to rows ``(evaluations, suboptimality, wall)``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, rows in traces.items():
        rows = np.asarray(rows, dtype=float)
        x = rows[:, 0] / n_samples if n_samples else rows[:, 0]
        ax.semilogy(x, np.maximum(rows[:, 1], 1e-300), label=name)
    ax.set_xlabel("epochs" if n_samples else "gradient evaluations")
    ax.set_ylabel("suboptimality")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    _save(fig, path)
