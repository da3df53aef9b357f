"""Figure rendering for reports and analyses.  Everything draws to a
file via the Agg backend; nothing opens a display."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_flip_histogram(hist, path):
    """Empirical flip-count frequencies with per-bucket accuracy."""
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ks = np.arange(hist.latent_dim + 1)
    ax1.bar(ks, hist.frequencies, color="tab:blue", label="frequency")
    ax1.set_xlabel("latent bits flipped")
    ax1.set_ylabel("fraction of samples")
    present = hist.frequencies > 0
    ax1.set_xlim(-0.5, max(ks[present].max() + 2, 8))
    finite = np.isfinite(hist.accuracies)
    if finite.any():
        ax2 = ax1.twinx()
        ax2.plot(ks[finite], hist.accuracies[finite], "o-",
                 color="tab:orange", label="accuracy")
        ax2.set_ylabel("defended accuracy")
        ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_k_flip_curve(analysis, path):
    """Analytic binomial k-flip probabilities."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ks = np.arange(analysis.latent_dim + 1)
    ax.semilogy(ks, np.maximum(analysis.k_flip_probs, 1e-300), "o-")
    ax.set_xlabel("number of flipped bits k")
    ax.set_ylabel("probability")
    ax.set_title(
        f"eta={analysis.eta:.5f}, |dz|={analysis.delta_z:.3f}, "
        f"p={analysis.flip_prob:.5f}"
    )
    ax.set_xlim(0, min(analysis.latent_dim, 32))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy_grid(report, path):
    """Grouped bars of per-cell accuracy from an evaluation report."""
    cells = [c for c in report.cells if c["status"] == "ok"]
    labels = [
        f"{c['attack']}\n{c['target']}"
        + (f"/{c['substitute']}" if c["substitute"] else "")
        for c in cells
    ]
    defenses = sorted({c["defense"] for c in cells})
    groups = {}
    for c, lab in zip(cells, labels):
        groups.setdefault(lab, {})[c["defense"]] = c["accuracy"]
    names = list(groups)
    width = 0.8 / max(len(defenses), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.0 * len(names)), 4))
    xs = np.arange(len(names))
    for j, d in enumerate(defenses):
        vals = [groups[n].get(d, np.nan) for n in names]
        ax.bar(xs + j * width, vals, width, label=f"defense={d}")
    ax.set_xticks(xs + width * (len(defenses) - 1) / 2)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_history(history, path):
    """Per-epoch training losses of the three-objective VAE run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = np.arange(1, len(history) + 1)
    for key in ("loss_f", "loss_g", "loss_h"):
        if history and key in history[0]:
            ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
