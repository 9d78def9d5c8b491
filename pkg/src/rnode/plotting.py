"""Static matplotlib figures written next to the CSV exports.

Everything renders through the non-interactive Agg backend; each function
writes one PNG and returns its path.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cnf import trajectory_positions  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_density(axes, logp, path, data=None):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    if len(axes) == 1:
        ax.plot(axes[0], np.exp(logp), color="C0", label="model")
        if data is not None:
            ax.hist(np.asarray(data)[:, 0], bins=80, density=True, alpha=0.35,
                    color="C1", label="data")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        ax.legend()
    else:
        extent = [axes[0][0], axes[0][-1], axes[1][0], axes[1][-1]]
        im = ax.imshow(np.exp(logp), origin="lower", extent=extent, cmap="magma")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_aspect("equal")
    ax.set_title("model density")
    return _save(fig, path)


def plot_samples(samples, path, data=None):
    samples = np.asarray(samples)
    fig, ax = plt.subplots(figsize=(5, 5))
    if samples.shape[1] == 1:
        ax.hist(samples[:, 0], bins=80, density=True, alpha=0.6, label="samples")
        if data is not None:
            ax.hist(np.asarray(data)[:, 0], bins=80, density=True, alpha=0.4, label="data")
        ax.legend()
    else:
        if data is not None:
            data = np.asarray(data)
            ax.scatter(data[:, 0], data[:, 1], s=2, alpha=0.3, color="0.6", label="data")
        ax.scatter(samples[:, 0], samples[:, 1], s=3, color="C3", label="samples")
        ax.set_aspect("equal")
        ax.legend(loc="upper right", markerscale=4)
    ax.set_title("samples")
    return _save(fig, path)


def plot_trajectories(trace, path, limit=40):
    """Paths from data space (dots) to the base space (crosses)."""
    Z = trajectory_positions(trace)[:, :limit]
    times = np.array([t for t, _ in trace])
    fig, ax = plt.subplots(figsize=(5, 5))
    if Z.shape[2] == 1:
        ax.plot(times, Z[:, :, 0], lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("z")
    else:
        for b in range(Z.shape[1]):
            ax.plot(Z[:, b, 0], Z[:, b, 1], lw=0.8, color="C0", alpha=0.7)
        ax.scatter(Z[0, :, 0], Z[0, :, 1], s=8, color="C1", zorder=3)
        ax.scatter(Z[-1, :, 0], Z[-1, :, 1], s=12, marker="x", color="C2", zorder=3)
        ax.set_aspect("equal")
    ax.set_title("trajectories")
    return _save(fig, path)


def plot_nfe_vs_frob(groups, path):
    """``groups`` maps a label to ``(frob, nfe)`` arrays."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, (label, (frob, nfe)) in enumerate(groups.items()):
        ax.scatter(frob, nfe, s=8, alpha=0.6, color=f"C{i}", label=label)
    ax.set_xlabel("integrated squared Jacobian Frobenius norm")
    ax.set_ylabel("NFE")
    ax.legend()
    return _save(fig, path)


def plot_metrics(history, path):
    """Loss, validation bits/dim and NFE of a single run against epoch."""
    fig, axs = plt.subplots(1, 3, figsize=(12, 3.6))
    ep = history.column("epoch")
    for ax, name in zip(axs, ("loss", "val_bpd", "nfe")):
        ax.plot(ep, history.column(name), color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
    return _save(fig, path)


def plot_ablation(result, path):
    """Validation bits/dim and Frobenius reading against epoch for every run."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for i, ((variant, seed), hist) in enumerate(sorted(result.runs.items())):
        label = variant if len(result.runs) <= 4 else f"{variant}/{seed}"
        ep = hist.column("epoch")
        a1.plot(ep, hist.column("val_bpd"), color=f"C{i % 10}", label=label)
        a2.plot(ep, hist.column("frob"), color=f"C{i % 10}", label=label)
    a1.set_xlabel("epoch")
    a1.set_ylabel("validation bits/dim")
    a2.set_xlabel("epoch")
    a2.set_ylabel("mean squared Frobenius norm")
    a2.legend()
    return _save(fig, path)
