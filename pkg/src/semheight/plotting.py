"""Figures for comparison and noise-sweep results (Agg backend, files only)."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
COLOURS = {"view": "#1f77b4", "map": "#d62728"}


def _curve(rows, key):
    pts = [(r["frames"], r[key], r[key.replace("miou", "pixevals")]) for r in rows
           if not math.isnan(r[key])]
    return np.array(pts) if pts else np.zeros((0, 3))


def plot_comparison(mean_rows, path):
    """mIoU against frames and against labeller pixel evaluations (overall mean)."""
    rows = [r for r in mean_rows if r["scene"] == "all"]
    with plt.rc_context(STYLE):
        fig, (ax_f, ax_c) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for name in ("view", "map"):
            c = _curve(rows, f"{name}_miou")
            if len(c):
                ax_f.plot(c[:, 0], c[:, 1], "o-", ms=3, color=COLOURS[name], label=f"{name}-based")
                ax_c.plot(c[:, 2], c[:, 1], "o-", ms=3, color=COLOURS[name], label=f"{name}-based")
        ax_f.set_xlabel("frames")
        ax_f.set_ylabel("mean IoU")
        ax_c.set_xlabel("labeller pixel evaluations")
        ax_c.set_xscale("log")
        ax_f.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_noise_heatmaps(noise_rows, pose_grid, depth_grid, path):
    """Side-by-side heat maps of final mIoU over the noise grid."""
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for ax, name in zip(axes, ("view", "map")):
            table = {(r["sigma_pose"], r["sigma_depth"]): r["miou_mean"]
                     for r in noise_rows if r["pipeline"] == name}
            grid = np.array([[table.get((float(p), float(d)), np.nan) for d in depth_grid]
                             for p in pose_grid])
            im = ax.imshow(grid, origin="lower", vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
            ax.set_xticks(range(len(depth_grid)), [f"{d:g}" for d in depth_grid])
            ax.set_yticks(range(len(pose_grid)), [f"{p:g}" for p in pose_grid])
            ax.set_xlabel("depth noise sigma (m)")
            ax.set_ylabel("pose noise sigma (m)")
            ax.set_title(f"{name}-based")
            for (i, j), v in np.ndenumerate(grid):
                if not np.isnan(v):
                    ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7,
                            color="white" if v < 0.5 else "black")
        fig.colorbar(im, ax=axes, label="mean IoU", shrink=0.9)
        fig.savefig(path, dpi=150)
        plt.close(fig)
