"""Figure and delimited-text rendering for the CLI artifact paths.

All writers are deterministic: the Agg backend, fixed dpi, suppressed PNG
metadata, and explicit line terminators keep artifacts byte-identical across
runs and worker scheduling.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .depth_label import ObjectDepthMap, SamplePoint
from .evaluation import DIFFICULTIES, APResult

_SAVEFIG_KW = {"metadata": {"Software": None}}


def _atomic_savefig(fig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", **_SAVEFIG_KW)
    plt.close(fig)
    os.replace(tmp, path)


def save_depth_overlay(
    path,
    dmap: ObjectDepthMap,
    points: Sequence[SamplePoint],
    centers: Sequence[tuple[float, float]],
    depth_range: tuple[float, float] = (1.0, 60.0),
) -> None:
    """Depth blocks in gray (near = bright), centers as green triangles,
    sample points as red circles, all in image coordinates."""
    ih, iw = dmap.image_hw
    lo, hi = depth_range
    shade = np.zeros(dmap.depth.shape, dtype=np.float64)
    valid = dmap.instance >= 0
    if valid.any():
        t = (np.clip(dmap.depth[valid], lo, hi) - lo) / max(hi - lo, 1e-9)
        shade[valid] = 1.0 - 0.9 * t

    fig = plt.figure(figsize=(iw / 100.0, ih / 100.0), dpi=100)
    ax = fig.add_axes((0.0, 0.0, 1.0, 1.0))
    ax.imshow(
        shade,
        cmap="gray",
        vmin=0.0,
        vmax=1.0,
        extent=(0, iw, ih, 0),
        interpolation="nearest",
    )
    if centers:
        cx = [c[0] for c in centers]
        cy = [c[1] for c in centers]
        ax.scatter(cx, cy, marker="^", s=60, c="#00cc44", edgecolors="none", zorder=3)
    if points:
        px = [p.image_xy[0] for p in points]
        py = [p.image_xy[1] for p in points]
        ax.scatter(px, py, marker="o", s=40, c="#ee2222", edgecolors="none", zorder=4)
    ax.set_xlim(0, iw)
    ax.set_ylim(ih, 0)
    ax.set_axis_off()
    _atomic_savefig(fig, path)


def save_ap_figure(path, result: APResult) -> None:
    """Grouped bar chart of AP per class x metric, one bar per difficulty."""
    groups = [(c, met) for c in result.classes for met in result.metrics]
    x = np.arange(len(groups), dtype=np.float64)
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(groups)), 4.0), dpi=100)
    for k, lvl in enumerate(DIFFICULTIES):
        vals = []
        for c, met in groups:
            cell = result.cells[(c, lvl, met)]
            vals.append(0.0 if cell.ap is None else cell.ap)
        ax.bar(x + (k - 1) * width, vals, width, label=lvl.name.title())
    ax.set_xticks(x)
    ax.set_xticklabels([f"{c}\n{met.upper()}" for c, met in groups], fontsize=8)
    ax.set_ylabel("AP@R40 (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _atomic_savefig(fig, path)


def write_ap_csv(path, result: APResult) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "metric", "difficulty", "ap", "n_gt", "tp", "fp", "fn"])
        for c in result.classes:
            for met in result.metrics:
                for lvl in DIFFICULTIES:
                    cell = result.cells[(c, lvl, met)]
                    ap = "" if cell.ap is None else f"{cell.ap:.6f}"
                    writer.writerow(
                        [c, met, lvl.name.lower(), ap, cell.n_gt, cell.tp, cell.fp, cell.fn]
                    )
    os.replace(tmp, path)


def write_bench_csv(path, rows: Sequence[dict]) -> None:
    """rows: dicts with keys kernel, median_s, iters."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kernel", "median_s", "iters"])
        for row in rows:
            writer.writerow([row["kernel"], f"{row['median_s']:.6f}", row["iters"]])
    os.replace(tmp, path)
