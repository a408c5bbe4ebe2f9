"""Static report figures written to files (Agg backend, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["zscore_chart", "trajectory_figure", "occupation_histogram"]


def zscore_chart(reports, path, threshold: float = 3.0):
    names = [r.name for r in reports]
    z = np.array([r.z_score for r in reports])
    colors = ["tab:green" if r.passed else "tab:red" for r in reports]
    fig, ax = plt.subplots(figsize=(8, 0.3 * len(reports) + 1.5))
    ax.barh(np.arange(len(z)), np.clip(z, -10, 10), color=colors)
    ax.axvline(threshold, ls="--", c="k", lw=0.8)
    ax.axvline(-threshold, ls="--", c="k", lw=0.8)
    ax.set_yticks(np.arange(len(z)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("z-score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def trajectory_figure(batch, path, n_show: int = 5, body=None):
    """First coordinates of a few paths and the accumulated local time."""
    if batch.states is None:
        raise ValueError("trajectory figure needs recorded states")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    ax = axes[0]
    d = batch.states.shape[-1]
    if d >= 2:
        for i in range(min(n_show, len(batch))):
            ax.plot(batch.states[i, :, 0], batch.states[i, :, 1], lw=0.6)
        if body is not None and getattr(body, "kind", "") == "ellipsoid" and d == 2:
            t = np.linspace(0, 2 * np.pi, 400)
            ax.plot(body.semiaxes[0] * np.cos(t), body.semiaxes[1] * np.sin(t), "k", lw=1)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal", adjustable="datalim")
    else:
        for i in range(min(n_show, len(batch))):
            ax.plot(batch.times, batch.states[i, :, 0], lw=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel("x1")
    ax = axes[1]
    for key, inc in batch.local_time.items():
        mean = np.concatenate([[0.0], np.cumsum(inc.mean(axis=0))])
        ax.plot(batch.times, mean, label=key)
    if batch.local_time:
        ax.legend(fontsize=8)
    ax.set_xlabel("t")
    ax.set_ylabel("mean local time")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def occupation_histogram(batch, path, coord: int = 0, bins: int = 60):
    """Histogram of recorded states after the first record."""
    if batch.states is None:
        raise ValueError("histogram needs recorded states")
    vals = batch.states[:, 1:, coord].ravel()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(vals, bins=bins, density=True, color="tab:blue", alpha=0.8)
    ax.set_xlabel(f"x{coord + 1}")
    ax.set_ylabel("density")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
