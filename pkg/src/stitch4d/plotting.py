"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .addmask import MaskBundle  # noqa: E402
from .frames import RgbFrame  # noqa: E402


def plot_trajectory(pred_centers, ref_centers, path, title: str = "camera trajectory") -> Path:
    """Top-down (x, z) and side (x, y) views of two center sequences."""
    pred = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref_centers, dtype=np.float64).reshape(-1, 3)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (i, j, lab) in zip(axes, [(0, 2, ("x", "z")), (0, 1, ("x", "y"))]):
        ax.plot(ref[:, i], ref[:, j], "o-", color="0.3", label="reference", ms=3)
        ax.plot(pred[:, i], pred[:, j], "x--", color="tab:red", label="aligned prediction", ms=4)
        ax.set_xlabel(lab[0])
        ax.set_ylabel(lab[1])
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def mask_montage(masks: MaskBundle, path, projected: RgbFrame | None = None, title: str = "") -> Path:
    """Side-by-side panels of the projected image and each mask of a bundle."""
    panels = []
    if projected is not None:
        panels.append(("projected", projected.data))
    panels += [
        ("hole", masks.hole.bits),
        ("curtain disc", masks.curtain_disc.bits),
        ("curtain FG-BG", masks.curtain_fb.bits),
        ("info addition", masks.info_addition.bits),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.6))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img, cmap=None if img.ndim == 3 else "gray", interpolation="nearest")
        ax.set_title(f"{name} ({int(img.sum()) if img.ndim == 2 else ''})".replace(" ()", ""), fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
