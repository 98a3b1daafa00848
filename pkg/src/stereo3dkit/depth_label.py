"""Depth supervision targets on coarse grids, and the sampling that reads them.

Depth is discretized with linearly increasing bin widths (LID): bin edges
e_i = d_min + (d_max - d_min) * i * (i + 1) / (K * (K + 1)), giving fine
resolution near the camera where projected geometry is most sensitive.

Object depth maps rasterize each labeled 2D box onto a 1/4- or 1/16-scale
grid filled with the object's 3D center depth; nearer objects win overlaps.
For supervision/readout a per-object sample point is chosen inside the
largest unoccluded rectangle of the box so the decoded depth belongs to the
object itself rather than whatever occludes its center.

Grid cell (r, c) covers image pixels [c / s_x, (c + 1) / s_x) horizontally,
so the continuous image point of a cell center is (c + 0.5) / s_x with
s_x = grid_w / image_w.  Bilinear sampling of uv-normalized points uses the
same convention: grid coordinate x = u * grid_w - 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Box2D, box3d_from_label, project_point
from .kitti_io import CameraCalib, ObjectLabel


@dataclass(frozen=True)
class DepthBinSpec:
    """Increasing-width depth discretization over [min_depth, max_depth]."""

    min_depth: float = 1.0
    max_depth: float = 60.0
    n_bins: int = 80

    def __post_init__(self) -> None:
        if not 0.0 < self.min_depth < self.max_depth:
            raise ValueError(f"need 0 < min_depth < max_depth, got {self}")
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")


def lid_bin_edges(spec: DepthBinSpec) -> np.ndarray:
    """The K+1 bin edges; widths grow linearly with the bin index."""
    i = np.arange(spec.n_bins + 1, dtype=np.float64)
    span = spec.max_depth - spec.min_depth
    return spec.min_depth + span * i * (i + 1.0) / (spec.n_bins * (spec.n_bins + 1.0))


def lid_bin_centers(spec: DepthBinSpec) -> np.ndarray:
    edges = lid_bin_edges(spec)
    return 0.5 * (edges[:-1] + edges[1:])


def lid_encode(spec: DepthBinSpec, depth) -> np.ndarray | int:
    """Depth -> bin index; out-of-range depths clamp to the first/last bin."""
    edges = lid_bin_edges(spec)
    idx = np.searchsorted(edges, np.asarray(depth, dtype=np.float64), side="right") - 1
    idx = np.clip(idx, 0, spec.n_bins - 1)
    if np.isscalar(depth) or np.ndim(depth) == 0:
        return int(idx)
    return idx.astype(np.int64)


def lid_decode(spec: DepthBinSpec, probs: np.ndarray) -> np.ndarray | float:
    """Expected depth under a probability vector over the K bins (last axis)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != spec.n_bins:
        raise ValueError(f"expected {spec.n_bins} bins, got {probs.shape[-1]}")
    out = probs @ lid_bin_centers(spec)
    return float(out) if out.ndim == 0 else out


def grid_shape(image_hw: tuple[int, int], scale: float) -> tuple[int, int]:
    """Grid dims covering the whole image at the nominal scale (ceil rule)."""
    h, w = image_hw
    if h <= 0 or w <= 0 or scale <= 0:
        raise ValueError(f"bad image size {image_hw} or scale {scale}")
    return (math.ceil(h * scale - 1e-9), math.ceil(w * scale - 1e-9))


def raster_cells(
    box: Box2D, image_hw: tuple[int, int], grid_hw: tuple[int, int]
) -> tuple[int, int, int, int] | None:
    """Grid cells touched by a box: (r0, c0, r1, c1) half-open, or None if empty.

    Columns span floor(x1 * s_x) to ceil(x2 * s_x), clipped to the grid, with
    s_x the effective per-axis scale grid_w / image_w (same for rows).
    """
    ih, iw = image_hw
    gh, gw = grid_hw
    sx, sy = gw / iw, gh / ih
    c0 = max(0, math.floor(box.x1 * sx))
    c1 = min(gw, math.ceil(box.x2 * sx))
    r0 = max(0, math.floor(box.y1 * sy))
    r1 = min(gh, math.ceil(box.y2 * sy))
    if r1 <= r0 or c1 <= c0:
        return None
    return (r0, c0, r1, c1)


@dataclass(eq=False)
class ObjectDepthMap:
    """Coarse-grid depth labels: +inf / instance -1 where no object projects."""

    depth: np.ndarray
    instance: np.ndarray
    image_hw: tuple[int, int]
    scale: float

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.depth.shape


def render_object_depth_map(
    labels: Sequence[ObjectLabel], image_hw: tuple[int, int], scale: float = 0.25
) -> ObjectDepthMap:
    """Rasterize labeled boxes onto a scale-reduced grid of 3D-center depths.

    Every cell touched by a box takes that object's depth unless a strictly
    nearer object already claimed it (ties keep the earlier label, so output
    is deterministic in label order).  DontCare and non-positive-depth rows
    are skipped.  The instance channel holds the winning label's index.
    """
    gh, gw = grid_shape(image_hw, scale)
    depth = np.full((gh, gw), np.inf, dtype=np.float64)
    instance = np.full((gh, gw), -1, dtype=np.int32)
    for idx, label in enumerate(labels):
        if label.is_dontcare or label.depth <= 0.0:
            continue
        cells = raster_cells(label.box2d, image_hw, (gh, gw))
        if cells is None:
            continue
        r0, c0, r1, c1 = cells
        region = depth[r0:r1, c0:c1]
        closer = label.depth < region
        region[closer] = label.depth
        instance[r0:r1, c0:c1][closer] = idx
    return ObjectDepthMap(depth=depth, instance=instance, image_hw=image_hw, scale=scale)


def max_vertical_span_rectangle(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Largest all-true axis-aligned rectangle, preferring vertical extent.

    Selection order: maximal height, then maximal width, then leftmost
    column, then topmost row.  Returns (r0, c0, r1, c1) half-open, or None
    for an all-false mask.  Height is scanned via per-column run lengths of
    consecutive true cells.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    if not mask.any():
        return None
    h, w = mask.shape

    run = np.zeros(w, dtype=np.int64)
    best_h = 0
    for r in range(h):
        run = (run + 1) * mask[r]
        best_h = max(best_h, int(run.max()))

    best = None  # ((-width, c0, r0), rect)
    run = np.zeros(w, dtype=np.int64)
    for r in range(h):
        run = (run + 1) * mask[r]
        ok = run >= best_h
        if not ok.any():
            continue
        edges = np.flatnonzero(np.diff(np.concatenate(([0], ok.view(np.int8), [0]))))
        for c0, c1 in zip(edges[::2], edges[1::2]):
            r0 = r - best_h + 1
            key = (-(int(c1) - int(c0)), int(c0), r0)
            if best is None or key < best[0]:
                best = (key, (r0, int(c0), r + 1, int(c1)))
    return best[1]


@dataclass(frozen=True)
class SamplePoint:
    """Where to read an object's depth off the coarse map.

    uv is normalized by image (width, height); offset is the displacement
    from the projected 3D center, normalized by 2D box (width, height).
    visible_rect is the chosen unoccluded rectangle in continuous image
    coordinates, or None when the object was fully covered and the sample
    fell back to the 2D box center.
    """

    uv: tuple[float, float]
    offset: tuple[float, float]
    image_xy: tuple[float, float]
    visible_rect: tuple[float, float, float, float] | None
    fallback: bool


def _normalized_offset(point_xy, projected_xy, box: Box2D) -> tuple[float, float]:
    bw = max(box.width, 1e-9)
    bh = max(box.height, 1e-9)
    return (
        (point_xy[0] - projected_xy[0]) / bw,
        (point_xy[1] - projected_xy[1]) / bh,
    )


def projected_center(label: ObjectLabel, calib: CameraCalib) -> tuple[float, float]:
    """Image-plane projection of the 3D geometric center."""
    center = box3d_from_label(label.location_xyz, label.dims_hwl, label.rotation_y).center
    return project_point(calib.p2, center)


def center_sample_point(
    label: ObjectLabel, calib: CameraCalib, image_hw: tuple[int, int]
) -> SamplePoint:
    """Baseline sampling mode: read the map at the projected 3D center."""
    ih, iw = image_hw
    px, py = projected_center(label, calib)
    return SamplePoint(
        uv=(min(max(px / iw, 0.0), 1.0), min(max(py / ih, 0.0), 1.0)),
        offset=(0.0, 0.0),
        image_xy=(px, py),
        visible_rect=None,
        fallback=False,
    )


def visible_sample_point(
    target: ObjectLabel,
    labels: Sequence[ObjectLabel],
    calib: CameraCalib,
    image_hw: tuple[int, int],
    scale: float = 0.25,
) -> SamplePoint:
    """Pick a sample point inside the target's largest unoccluded rectangle.

    Occluders are other labels with strictly smaller depth (the target itself
    may appear in `labels`; it never occludes itself).  Both boxes are
    rasterized at the depth-map scale so the decision matches what the
    rendered map actually contains.  If nothing remains visible the point
    falls back to the 2D box center with the fallback flag set.
    """
    if target.depth <= 0.0:
        raise ValueError(f"target depth must be positive, got {target.depth}")
    ih, iw = image_hw
    gh, gw = grid_shape(image_hw, scale)
    sx, sy = gw / iw, gh / ih

    rect = None
    cells = raster_cells(target.box2d, image_hw, (gh, gw))
    if cells is not None:
        r0, c0, r1, c1 = cells
        mask = np.ones((r1 - r0, c1 - c0), dtype=bool)
        for other in labels:
            if other is target or other.is_dontcare:
                continue
            if not 0.0 < other.depth < target.depth:
                continue
            ocells = raster_cells(other.box2d, image_hw, (gh, gw))
            if ocells is None:
                continue
            orr0 = max(ocells[0], r0)
            occ0 = max(ocells[1], c0)
            orr1 = min(ocells[2], r1)
            occ1 = min(ocells[3], c1)
            if orr1 > orr0 and occ1 > occ0:
                mask[orr0 - r0 : orr1 - r0, occ0 - c0 : occ1 - c0] = False
        local = max_vertical_span_rectangle(mask)
        if local is not None:
            rect = (r0 + local[0], c0 + local[1], r0 + local[2], c0 + local[3])

    if rect is None:
        point_xy = target.box2d.center
        visible_rect = None
        fallback = True
    else:
        rr0, cc0, rr1, cc1 = rect
        visible_rect = (cc0 / sx, rr0 / sy, cc1 / sx, rr1 / sy)
        point_xy = (
            0.5 * (visible_rect[0] + visible_rect[2]),
            0.5 * (visible_rect[1] + visible_rect[3]),
        )
        fallback = False

    # Keep the sample inside the annotated box (sub-cell boxes can place the
    # cell-span midpoint just outside it) and inside the image.
    px = min(max(point_xy[0], target.box2d.x1), target.box2d.x2)
    py = min(max(point_xy[1], target.box2d.y1), target.box2d.y2)
    px = min(max(px, 0.0), float(iw))
    py = min(max(py, 0.0), float(ih))

    proj_xy = projected_center(target, calib)
    return SamplePoint(
        uv=(px / iw, py / ih),
        offset=_normalized_offset((px, py), proj_xy, target.box2d),
        image_xy=(px, py),
        visible_rect=visible_rect,
        fallback=fallback,
    )


def grid_sample_bilinear(grid: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (n, 2) uv points in a (h, w, c) map.

    uv maps [0, 1] onto the node range: u=0 is column 0, u=1 is column w-1.
    Out-of-range points clamp to the border.  Integer coordinates reproduce
    node values exactly.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"grid must be (h, w, c), got {grid.shape}")
    h, w, _ = grid.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = np.clip(uv[:, 0] * (w - 1), 0.0, w - 1)
    y = np.clip(uv[:, 1] * (h - 1), 0.0, h - 1)
    x0 = np.clip(np.ceil(x) - 1, 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.ceil(y) - 1, 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    g00 = grid[y0, x0]
    g01 = grid[y0, x1]
    g10 = grid[y1, x0]
    g11 = grid[y1, x1]
    return (
        g00 * (1 - fx) * (1 - fy)
        + g01 * fx * (1 - fy)
        + g10 * (1 - fx) * fy
        + g11 * fx * fy
    )


@dataclass(eq=False)
class GridSampleGrads:
    """Analytic derivatives of a bilinear sample.

    corner_rc (n, 4, 2): row/col of the four support nodes per point.
    corner_weights (n, 4): d(out)/d(node value), identical across channels,
    nonnegative, summing to 1.  duv (n, c, 2): d(out)/d(u), d(out)/d(v).
    At integer coordinates the left/lower cell's linear piece is used; at the
    low border (coordinate 0) only the right/upper piece exists.
    """

    corner_rc: np.ndarray
    corner_weights: np.ndarray
    duv: np.ndarray


def grid_sample_gradients(grid: np.ndarray, uv: np.ndarray) -> GridSampleGrads:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"grid must be (h, w, c), got {grid.shape}")
    h, w, _ = grid.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = np.clip(uv[:, 0] * (w - 1), 0.0, w - 1)
    y = np.clip(uv[:, 1] * (h - 1), 0.0, h - 1)
    x0 = np.clip(np.ceil(x) - 1, 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.ceil(y) - 1, 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    corner_rc = np.stack(
        [
            np.stack([y0, x0], axis=1),
            np.stack([y0, x1], axis=1),
            np.stack([y1, x0], axis=1),
            np.stack([y1, x1], axis=1),
        ],
        axis=1,
    )
    g00 = grid[y0, x0]
    g01 = grid[y0, x1]
    g10 = grid[y1, x0]
    g11 = grid[y1, x1]
    dx = (g01 - g00) * (1 - fy)[:, None] + (g11 - g10) * fy[:, None]
    dy = (g10 - g00) * (1 - fx)[:, None] + (g11 - g01) * fx[:, None]
    duv = np.stack([dx * (w - 1), dy * (h - 1)], axis=2)
    return GridSampleGrads(corner_rc=corner_rc, corner_weights=weights, duv=duv)


def sample_object_depth(
    bin_logit_map: np.ndarray, point: SamplePoint, spec: DepthBinSpec
) -> float:
    """Decode depth at a sample point: bilinear logits -> softmax -> expectation.

    The map holds per-cell logits over the K depth bins at cell centers; uv
    (image-normalized) is converted to the grid's cell-center convention
    before interpolation.
    """
    bin_logit_map = np.asarray(bin_logit_map, dtype=np.float64)
    if bin_logit_map.ndim != 3 or bin_logit_map.shape[2] != spec.n_bins:
        raise ValueError(
            f"expected (h, w, {spec.n_bins}) logit map, got {bin_logit_map.shape}"
        )
    gh, gw, _ = bin_logit_map.shape
    u, v = point.uv
    xg = u * gw - 0.5
    yg = v * gh - 0.5
    uu = xg / (gw - 1) if gw > 1 else 0.0
    vv = yg / (gh - 1) if gh > 1 else 0.0
    logits = grid_sample_bilinear(bin_logit_map, np.array([[uu, vv]]))[0]
    logits = logits - logits.max()
    exp = np.exp(logits)
    probs = exp / exp.sum()
    return float(lid_decode(spec, probs))


@dataclass(eq=False)
class BinTargetMap:
    """Per-cell depth-bin classification targets with a validity mask."""

    targets: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.targets = np.asarray(self.targets)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.targets.shape != self.valid.shape:
            raise ValueError(
                f"shape mismatch: targets {self.targets.shape} vs valid {self.valid.shape}"
            )


def bin_target_map(dmap: ObjectDepthMap, spec: DepthBinSpec) -> BinTargetMap:
    """Encode a rendered depth map into bin targets; background is invalid."""
    valid = dmap.instance >= 0
    targets = np.zeros(dmap.depth.shape, dtype=np.int64)
    if valid.any():
        targets[valid] = lid_encode(spec, dmap.depth[valid])
    return BinTargetMap(targets=targets, valid=valid)


def one_hot_logit_map(target: BinTargetMap, n_bins: int, logit: float = 50.0) -> np.ndarray:
    """Logit map whose softmax is (numerically) one-hot at the target bins.

    Invalid cells get uniform zeros.  Useful for building ground-truth maps
    that decode back to bin centers through :func:`sample_object_depth`.
    """
    h, w = target.targets.shape
    out = np.zeros((h, w, n_bins), dtype=np.float64)
    rr, cc = np.nonzero(target.valid)
    out[rr, cc, target.targets[rr, cc]] = logit
    return out


def save_depth_png16(dmap: ObjectDepthMap, path) -> None:
    """Write depth as 16-bit PNG in centimeters; 0 marks background."""
    valid = np.isfinite(dmap.depth) & (dmap.instance >= 0)
    arr = np.zeros(dmap.depth.shape, dtype=np.uint16)
    vals = np.round(dmap.depth[valid] * 100.0)
    arr[valid] = np.clip(vals, 1, 65535).astype(np.uint16)
    # explicit format: callers may hand us a tmp path without a .png suffix
    Image.fromarray(arr).save(path, format="PNG")


def load_depth_png16(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a centimeter-encoded 16-bit depth PNG back to (depth_m, valid)."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.uint16)
    valid = arr > 0
    depth = arr.astype(np.float64) / 100.0
    depth[~valid] = np.inf
    return depth, valid
