"""Classical block-matching stereo for manufacturing disparity ground truth.

Per pixel, the disparity in [0, max_disp] minimizing the sum of absolute
differences over an odd square window is selected (smallest disparity wins
ties).  Pixels failing a left-right consistency check or lying in
textureless windows are invalidated; downstream losses skip them.  All
window sums use integral images, so the cost of one disparity candidate is
independent of the window size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image


@dataclass(eq=False)
class DisparityMap:
    """disp in pixels at the stored scale; invalid pixels hold 0 / valid False.

    scale is the downsampling denominator relative to the matched resolution
    (1 for full resolution); values are divided on downsampling so
    disp <= max_disp / scale always holds on valid pixels.
    """

    disp: np.ndarray
    valid: np.ndarray
    scale: int = 1

    def __post_init__(self) -> None:
        self.disp = np.asarray(self.disp, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.disp.shape != self.valid.shape:
            raise ValueError(
                f"disp {self.disp.shape} and valid {self.valid.shape} differ"
            )


def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """(h, w) -> (h-k+1, w-k+1) sums of k x k windows, top-left indexed."""
    c = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0))), axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def _window_range(img: np.ndarray, k: int) -> np.ndarray:
    """Per-window dynamic range (max - min) via separable sliding extrema."""
    mx = sliding_window_view(img, k, axis=1).max(-1)
    mx = sliding_window_view(mx, k, axis=0).max(-1)
    mn = sliding_window_view(img, k, axis=1).min(-1)
    mn = sliding_window_view(mn, k, axis=0).min(-1)
    return mx - mn


def _match_one_direction(
    ref: np.ndarray,
    other: np.ndarray,
    block: int,
    max_disp: int,
    texture_ratio: float,
    subpixel: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """SAD argmin matching ref against other shifted rightward by d.

    Returns (disp, valid) on the window-center grid of shape
    (h - block + 1, w - block + 1).  Ascending scan with a strict '<' update
    keeps the smallest disparity on cost ties.
    """
    h, w = ref.shape
    k = block
    hh, ww = h - k + 1, w - k + 1
    inf = np.inf
    best_cost = np.full((hh, ww), inf)
    worst_cost = np.full((hh, ww), -inf)
    best_d = np.zeros((hh, ww), dtype=np.int64)
    n_cand = np.zeros((hh, ww), dtype=np.int64)
    c_minus = np.full((hh, ww), inf)
    c_plus = np.full((hh, ww), inf)
    prev_plane = None

    last_d = min(max_disp, w - k)
    for d in range(last_d + 1):
        plane = np.full((hh, ww), inf)
        diff = np.abs(ref[:, d:] - other[:, : w - d])
        plane[:, d:] = _box_sum(diff, k)
        seg = plane[:, d:]
        upd = seg < best_cost[:, d:]
        best_cost[:, d:][upd] = seg[upd]
        best_d[:, d:][upd] = d
        np.maximum(worst_cost[:, d:], seg, out=worst_cost[:, d:])
        n_cand[:, d:] += 1
        if subpixel:
            full_upd = np.zeros((hh, ww), dtype=bool)
            full_upd[:, d:] = upd
            if prev_plane is not None:
                c_minus[full_upd] = prev_plane[full_upd]
                c_plus[best_d == d - 1] = plane[best_d == d - 1]
            else:
                c_minus[full_upd] = inf
            c_plus[full_upd] = inf
            prev_plane = plane

    valid = n_cand > 0
    # Textureless windows: either zero dynamic range or a SAD spread too
    # small a fraction of (range * window area) to be informative.
    rng = _window_range(ref.astype(np.float64), k)
    spread = np.where(valid, worst_cost - best_cost, 0.0)
    textured = (rng > 0) & (spread > texture_ratio * rng * k * k)
    valid &= textured

    disp = best_d.astype(np.float64)
    if subpixel:
        refine = valid & np.isfinite(c_minus) & np.isfinite(c_plus)
        denom = c_minus - 2.0 * best_cost + c_plus
        with np.errstate(invalid="ignore"):
            offset = 0.5 * (c_minus - c_plus) / np.where(denom > 0, denom, 1.0)
        refine &= denom > 0
        disp[refine] += np.clip(offset[refine], -0.5, 0.5)
    return disp, valid


def block_match(
    left: np.ndarray,
    right: np.ndarray,
    block: int = 9,
    max_disp: int = 192,
    lr_tolerance: float = 1.0,
    texture_ratio: float = 0.02,
    subpixel: bool = False,
) -> DisparityMap:
    """Dense SAD block matching of a rectified grayscale pair.

    Searches d in [0, max_disp] inclusive.  A left pixel survives only if
    matching the right image back (computed by matching the horizontally
    flipped, swapped pair) lands within lr_tolerance of the same disparity.
    Border pixels where the window does not fit are invalid.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.ndim != 2 or left.shape != right.shape:
        raise ValueError(
            f"need equal-size grayscale images, got {left.shape} vs {right.shape}"
        )
    if block % 2 != 1 or block < 1:
        raise ValueError(f"block must be odd and positive, got {block}")
    if max_disp < 0:
        raise ValueError(f"max_disp must be >= 0, got {max_disp}")
    h, w = left.shape
    if h < block or w < block:
        raise ValueError(f"images {left.shape} smaller than block {block}")

    dl, vl = _match_one_direction(left, right, block, max_disp, texture_ratio, subpixel)
    dr_f, vr_f = _match_one_direction(
        np.fliplr(right), np.fliplr(left), block, max_disp, texture_ratio, subpixel
    )
    dr, vr = np.fliplr(dr_f), np.fliplr(vr_f)

    hh, ww = dl.shape
    cols = np.arange(ww)[None, :]
    rows = np.arange(hh)[:, None]
    partner = cols - np.round(dl).astype(np.int64)
    in_range = partner >= 0
    partner_c = np.clip(partner, 0, ww - 1)
    consistent = (
        vl
        & in_range
        & vr[rows, partner_c]
        & (np.abs(dl - dr[rows, partner_c]) <= lr_tolerance)
    )

    r = block // 2
    disp = np.zeros((h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    disp[r : r + hh, r : r + ww] = np.where(consistent, dl, 0.0)
    valid[r : r + hh, r : r + ww] = consistent
    return DisparityMap(disp=disp, valid=valid, scale=1)


def downsample_disparity(dmap: DisparityMap, factor: int = 4) -> DisparityMap:
    """Blockwise median of valid disparities, rescaled into the coarse grid.

    Each factor x factor block maps to one output pixel holding
    median(valid values) / factor; blocks with no valid pixel are invalid.
    """
    h, w = dmap.disp.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide image dims {dmap.disp.shape}")
    hf, wf = h // factor, w // factor
    vals = (
        dmap.disp.reshape(hf, factor, wf, factor)
        .transpose(0, 2, 1, 3)
        .reshape(hf, wf, factor * factor)
    )
    mask = (
        dmap.valid.reshape(hf, factor, wf, factor)
        .transpose(0, 2, 1, 3)
        .reshape(hf, wf, factor * factor)
    )
    masked = np.ma.masked_array(vals, mask=~mask)
    med = np.ma.median(masked, axis=2)
    valid = mask.any(axis=2)
    disp = np.where(valid, np.ma.filled(med, 0.0) / factor, 0.0)
    return DisparityMap(disp=disp, valid=valid, scale=dmap.scale * factor)


def save_disparity_png16(dmap: DisparityMap, path) -> None:
    """16-bit PNG, value = disparity * 256 rounded; 0 encodes invalid."""
    arr = np.zeros(dmap.disp.shape, dtype=np.uint16)
    vals = np.round(dmap.disp[dmap.valid] * 256.0)
    arr[dmap.valid] = np.clip(vals, 1, 65535).astype(np.uint16)
    # explicit format: callers may hand us a tmp path without a .png suffix
    Image.fromarray(arr).save(path, format="PNG")


def load_disparity_png16(path, scale: int = 1) -> DisparityMap:
    """Read a 16-bit disparity PNG back; 0 pixels become invalid."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.uint16)
    valid = arr > 0
    disp = np.where(valid, arr.astype(np.float64) / 256.0, 0.0)
    return DisparityMap(disp=disp, valid=valid, scale=scale)
