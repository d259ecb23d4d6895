"""Report figures.  Everything renders through the Agg backend to plain PNG
files with pinned metadata, so re-rendering the same data is byte-identical."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVEFIG_KWARGS = {"dpi": 130, "metadata": {"Software": "lavashield"}}

_MODE_COLORS = {
    "vanilla": "tab:red",
    "priors-only": "tab:orange",
    "state-checked-priors": "tab:blue",
}


def _color(mode: str) -> str:
    return _MODE_COLORS.get(mode, "tab:gray")


def plot_return_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                       path) -> None:
    """One smoothed episodic-return line per mode, against global step."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for mode, (steps, returns) in sorted(curves.items()):
        ax.plot(steps, returns, label=mode, color=_color(mode), lw=1.8)
    ax.set_xlabel("environment step")
    ax.set_ylabel("episodic return (smoothed)")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="center right", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KWARGS)
    plt.close(fig)


def plot_cumulative_violations(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                               path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for mode, (steps, totals) in sorted(curves.items()):
        ax.plot(steps, totals, label=mode, color=_color(mode), lw=1.8)
    ax.set_xlabel("environment step")
    ax.set_ylabel("cumulative violations (mean over seeds)")
    ax.legend(loc="upper left", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KWARGS)
    plt.close(fig)


def plot_visit_heatmap(heatmap: np.ndarray, path, title: str,
                       obstacle_mask: np.ndarray | None = None) -> None:
    """Log-scaled occupancy counts; obstacle cells get hatched outlines."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    shown = np.log1p(heatmap.astype(float))
    image = ax.imshow(shown, cmap="viridis")
    if obstacle_mask is not None:
        for r, c in zip(*np.nonzero(obstacle_mask)):
            ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False,
                                       edgecolor="red", lw=1.2))
    ax.set_title(title, fontsize=10)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(image, ax=ax, label="log(1 + visits)")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KWARGS)
    plt.close(fig)
