"""
Static plot images: learning curves and voxel slices
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .voxel import VoxelGrid  # noqa: E402

PathLike = Union[str, Path]
Curves = Dict[str, Dict[int, Tuple[List[int], List[float], Optional[int]]]]


def plot_curves(curves: Curves, out_path: PathLike, title: str = "Validation IOU",
                threshold: Optional[float] = None) -> Path:
    """
    One line per arm: the seed-mean validation IOU, with the per-seed spread
    shaded. A dashed vertical line marks a phase boundary when an arm has one.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 5))
    for arm, runs in curves.items():
        lengths = {len(its) for its, _, _ in runs.values()}
        first = next(iter(runs.values()))
        if len(lengths) == 1:
            iterations = np.asarray(first[0])
            ious = np.asarray([values for _, values, _ in runs.values()])
            line, = ax.plot(iterations, ious.mean(axis=0), label=arm)
            if len(runs) > 1:
                ax.fill_between(iterations, ious.min(axis=0), ious.max(axis=0), color=line.get_color(), alpha=0.2)
        else:
            for seed, (its, values, _) in runs.items():
                ax.plot(its, values, label=f"{arm} (seed {seed})")
        boundary = first[2]
        if boundary is not None:
            ax.axvline(boundary, linestyle="--", color="gray", linewidth=1)
    if threshold is not None:
        ax.axhline(threshold, linestyle=":", color="black", linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("IOU")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_log(iterations: Sequence[int], ious: Sequence[float], out_path: PathLike,
             title: str = "Validation IOU") -> Path:
    return plot_curves({"model": {0: (list(iterations), list(ious), None)}}, out_path, title)


def plot_slices(grids: Sequence[VoxelGrid], labels: Sequence[str], out_path: PathLike) -> Path:
    """Middle y-slice (x horizontal, z up) of each grid side by side"""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(grids), figsize=(4 * len(grids), 4), squeeze=False)
    for ax, grid, label in zip(axes[0], grids, labels):
        middle = grid.values[:, grid.resolution // 2, :]
        ax.imshow(middle.T, origin="lower", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(label)
        ax.set_xlabel("x")
        ax.set_ylabel("z")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
