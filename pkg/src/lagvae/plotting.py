"""PNG figures for the CLI report paths (Agg backend, no metadata stamps)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def composite(frames: np.ndarray) -> np.ndarray:
    """Sum body channels ``(..., n_bodies, H, W)`` into one image in [0, 1]."""
    return np.clip(np.asarray(frames).sum(-3), 0.0, 1.0)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def image_strip(rows: list[tuple[str, np.ndarray]], path, every: int = 1) -> Path:
    """One row per labelled sequence ``(T+1, n_bodies, H, W)``, time left to right."""
    seqs = [(label, composite(seq)[::every]) for label, seq in rows]
    n_cols = max(len(s) for _, s in seqs)
    fig, axes = plt.subplots(
        len(seqs), n_cols, figsize=(0.8 * n_cols + 0.6, 0.9 * len(seqs)), squeeze=False
    )
    for r, (label, seq) in enumerate(seqs):
        for c in range(n_cols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(seq):
                ax.imshow(seq[c], cmap="gray", vmin=0, vmax=1)
            else:
                ax.axis("off")
        axes[r, 0].set_ylabel(label, fontsize=7)
    for c in range(n_cols):
        axes[0, c].set_title(str(c * every), fontsize=6)
    fig.subplots_adjust(wspace=0.05, hspace=0.1)
    return _save(fig, path)


def loss_curves(history: list[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("total", "pred", "vae_nll", "kl", "vm_reg"):
        ax.plot(epochs, [h[key] for h in history], label=key, lw=0.8)
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    val = [(h["epoch"], h["val_pixel_mse"]) for h in history if h.get("val_pixel_mse") is not None]
    if val:
        bx.plot(*zip(*val), marker="o", ms=3)
    bx.set_xlabel("epoch")
    bx.set_ylabel("validation pixel MSE")
    fig.tight_layout()
    return _save(fig, path)


def potential_curve(angles: np.ndarray, values: np.ndarray, path, label: str = "learned V") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    order = np.argsort(angles)
    ax.plot(np.asarray(angles)[order], np.asarray(values)[order], marker=".")
    ax.set_xlabel("true angle (rad, 0 = upright)")
    ax.set_ylabel(label)
    fig.tight_layout()
    return _save(fig, path)


def control_traces(episode, path) -> Path:
    t = np.arange(len(episode.q)) * episode.dt
    fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
    axes[0].plot(t, episode.q)
    axes[0].set_ylabel("q")
    axes[1].step(t[:-1], episode.u, where="post")
    axes[1].set_ylabel("u")
    axes[2].semilogy(t, np.maximum(episode.goal_distance, 1e-12))
    axes[2].set_ylabel("goal distance")
    axes[2].set_xlabel("time (s)")
    fig.tight_layout()
    return _save(fig, path)


def step_errors(per_step: np.ndarray, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(per_step)), per_step, marker=".")
    ax.set_xlabel("prediction step")
    ax.set_ylabel("pixel MSE")
    fig.tight_layout()
    return _save(fig, path)
