"""Static figures for the CLI report paths (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .synth import ADDITION, CLASS_NAMES, DELETION, UNCHANGED  # noqa: E402

CLASS_COLORS = {UNCHANGED: "#bdbdbd", ADDITION: "#1a9850", DELETION: "#d73027"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def dz_map(support: np.ndarray, dz: np.ndarray, path, grid_shape: Optional[tuple] = None,
           extent: Optional[Sequence[float]] = None, title: str = "dz [m]") -> Path:
    """Diverging map of height change, as an image on grids or a scatter otherwise."""
    lim = float(np.max(np.abs(dz))) if len(dz) else 1.0
    lim = lim or 1.0
    fig, ax = plt.subplots(figsize=(6, 5))
    if grid_shape is not None:
        im = ax.imshow(np.asarray(dz).reshape(grid_shape), origin="lower", cmap="RdBu_r",
                       vmin=-lim, vmax=lim, extent=extent, interpolation="nearest")
    else:
        im = ax.scatter(support[:, 0], support[:, 1], c=dz, s=1, cmap="RdBu_r",
                        vmin=-lim, vmax=lim, linewidths=0)
    fig.colorbar(im, ax=ax)
    ax.set(title=title, xlabel="x [m]", ylabel="y [m]", aspect="equal")
    return _save(fig, path)


def label_map(support: np.ndarray, labels: np.ndarray, path, grid_shape: Optional[tuple] = None,
              extent: Optional[Sequence[float]] = None, title: str = "change labels") -> Path:
    classes = (UNCHANGED, ADDITION, DELETION)
    cmap = ListedColormap([CLASS_COLORS[c] for c in classes])
    fig, ax = plt.subplots(figsize=(6, 5))
    if grid_shape is not None:
        ax.imshow(np.asarray(labels).reshape(grid_shape), origin="lower", cmap=cmap,
                  vmin=-0.5, vmax=2.5, extent=extent, interpolation="nearest")
    else:
        ax.scatter(support[:, 0], support[:, 1], c=labels, s=1, cmap=cmap,
                   vmin=-0.5, vmax=2.5, linewidths=0)
    handles = [plt.Line2D([], [], marker="s", ls="", color=CLASS_COLORS[c], label=CLASS_NAMES[c])
               for c in classes]
    ax.legend(handles=handles, loc="upper right", fontsize=8)
    ax.set(title=title, xlabel="x [m]", ylabel="y [m]", aspect="equal")
    return _save(fig, path)


def dz_histogram(dz: np.ndarray, path, gmm=None, labels: Optional[np.ndarray] = None,
                 min_abs_dz: Optional[float] = None) -> Path:
    """Histogram of dz (stacked by label when given) with the mixture density overlaid."""
    dz = np.asarray(dz)
    fig, ax = plt.subplots(figsize=(7, 4))
    bins = np.linspace(dz.min(), dz.max(), 81) if np.ptp(dz) > 0 else 10
    if labels is None:
        ax.hist(dz, bins=bins, density=True, color="#7f7f7f")
    else:
        parts = [dz[labels == c] for c in (DELETION, UNCHANGED, ADDITION)]
        ax.hist(parts, bins=bins, density=True, stacked=True,
                color=[CLASS_COLORS[c] for c in (DELETION, UNCHANGED, ADDITION)],
                label=[CLASS_NAMES[c] for c in (DELETION, UNCHANGED, ADDITION)])
        ax.legend(fontsize=8)
    if gmm is not None:
        xs = np.linspace(dz.min(), dz.max(), 400)
        ax.plot(xs, np.exp(gmm.log_joint(xs)).sum(axis=1), "k-", lw=1, label="mixture")
    if min_abs_dz is not None:
        for s in (-1, 1):
            ax.axvline(s * min_abs_dz, color="k", ls=":", lw=0.8)
    ax.set(xlabel="dz [m]", ylabel="density", yscale="log")
    return _save(fig, path)


def training_curves(reports: Sequence, path, labels: Optional[Sequence[str]] = None) -> Path:
    """Train loss and validation MSE per epoch for each fitted model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, r in enumerate(reports):
        name = labels[k] if labels else f"model {k}"
        ep = np.arange(1, len(r.train_loss) + 1)
        ax.plot(ep, r.train_loss, "-", label=f"{name} train loss")
        ax.plot(ep, r.val_mse, "--", label=f"{name} val MSE")
        if r.best_epoch >= 0:
            ax.plot(r.best_epoch + 1, r.val_mse[r.best_epoch], "ko", ms=4)
    ax.set(xlabel="epoch", ylabel="normalised units", yscale="log")
    ax.legend(fontsize=8)
    return _save(fig, path)


def search_trace(trials: Sequence, path) -> Path:
    """Validation MSE per trial with the running best."""
    fig, ax = plt.subplots(figsize=(6, 4))
    done = [t for t in trials if t.status == "completed"]
    ax.plot([t.index for t in done], [t.mse for t in done], "o", ms=4, label="completed")
    pruned = [t for t in trials if t.status == "pruned" and t.mse is not None]
    if pruned:
        ax.plot([t.index for t in pruned], [t.mse for t in pruned], "x", ms=4, label="pruned")
    if done:
        best = np.minimum.accumulate([t.mse for t in done])
        ax.step([t.index for t in done], best, where="post", color="k", lw=1, label="best so far")
    ax.set(xlabel="trial", ylabel="validation MSE", yscale="log")
    ax.legend(fontsize=8)
    return _save(fig, path)
