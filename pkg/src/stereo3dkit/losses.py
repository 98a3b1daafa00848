"""Training losses: focal classification, box/orientation regression,
uncertainty-weighted object depth, and the two dense-map terms.

Object-level terms are computed per matched prediction and summed; the
aggregation in :func:`total_loss` divides that sum by the number of
matched objects and adds the frame-level map losses unnormalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .depth_label import BinTargetMap
from .matching import PROB_EPS, FocalParams

REDUCTIONS = ("none", "sum", "mean")


def focal_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    fp: FocalParams = FocalParams(),
    reduction: str = "mean",
):
    """alpha-balanced focal loss on probabilities vs binary targets.

    Positive elements contribute alpha * (1-p)^gamma * -log(p), negatives
    (1-alpha) * p^gamma * -log(1-p).  Probabilities are clamped away from
    {0, 1} before the logs.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("focal targets must be binary")
    pos = -fp.alpha * (1.0 - p) ** fp.gamma * np.log(p)
    neg = -(1.0 - fp.alpha) * p**fp.gamma * np.log(1.0 - p)
    out = np.where(t > 0.5, pos, neg)
    if reduction == "sum":
        return float(out.sum())
    if reduction == "mean":
        return float(out.mean())
    return out


@dataclass(frozen=True)
class DepthPrediction:
    """Decoded object depth with its predicted log-scale uncertainty."""

    depth: float
    sigma: float


def depth_uncertainty_loss(pred: DepthPrediction, gt_depth: float) -> float:
    """Laplacian aleatoric depth loss: sqrt(2) * exp(-sigma) * |err| + sigma.

    For a fixed error the minimum over sigma sits at ln(sqrt(2) * |err|),
    so the model is rewarded for predicting its own error scale.
    """
    err = abs(pred.depth - gt_depth)
    return float(np.sqrt(2.0) * np.exp(-pred.sigma) * err + pred.sigma)


@dataclass(eq=False)
class OrientationPrediction:
    """Multi-bin heading: per-bin probabilities and per-bin angle offsets."""

    bin_probs: np.ndarray
    bin_offsets: np.ndarray

    def __post_init__(self) -> None:
        self.bin_probs = np.asarray(self.bin_probs, dtype=np.float64).reshape(-1)
        self.bin_offsets = np.asarray(self.bin_offsets, dtype=np.float64).reshape(-1)
        if self.bin_probs.shape != self.bin_offsets.shape:
            raise ValueError("bin_probs and bin_offsets must have equal length")

    @property
    def n_bins(self) -> int:
        return len(self.bin_probs)


def wrap_angle(angle: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((angle + np.pi) % (2.0 * np.pi) - np.pi)


def orientation_bin_targets(angle: float, n_bins: int = 12) -> tuple[int, float]:
    """Split an angle into (bin index, residual from that bin's center).

    Bins tile [-pi, pi) uniformly; residuals lie in [-delta/2, delta/2).
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    delta = 2.0 * np.pi / n_bins
    a = wrap_angle(angle)
    k = int(np.floor((a + np.pi) / delta)) % n_bins
    center = -np.pi + (k + 0.5) * delta
    return k, wrap_angle(a - center)


def orientation_loss(pred: OrientationPrediction, gt_angle: float) -> float:
    """-log p[gt bin] plus L1 on that bin's angle residual."""
    k, residual = orientation_bin_targets(gt_angle, pred.n_bins)
    p = np.clip(pred.bin_probs[k], PROB_EPS, 1.0)
    return float(-np.log(p) + abs(pred.bin_offsets[k] - residual))


def perfect_orientation(angle: float, n_bins: int = 12) -> OrientationPrediction:
    """The prediction with zero orientation loss for the given angle."""
    k, residual = orientation_bin_targets(angle, n_bins)
    probs = np.zeros(n_bins)
    probs[k] = 1.0
    offsets = np.zeros(n_bins)
    offsets[k] = residual
    return OrientationPrediction(bin_probs=probs, bin_offsets=offsets)


@dataclass(eq=False)
class BoxRegression:
    """Normalized regression quantities for one object.

    center_2d and size_2d describe the 2D box, center_3d_proj the projected
    3D center, sample_offset the depth-map sampling offset; all normalized
    the same way on both prediction and target sides.
    """

    center_2d: np.ndarray
    size_2d: np.ndarray
    center_3d_proj: np.ndarray
    sample_offset: np.ndarray

    def __post_init__(self) -> None:
        for name in ("center_2d", "size_2d", "center_3d_proj", "sample_offset"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(2))


def regression_2d_loss(pred: BoxRegression, target: BoxRegression) -> float:
    """Summed L1 over the four normalized 2D quantities (8 coordinates)."""
    total = 0.0
    for name in ("center_2d", "size_2d", "center_3d_proj", "sample_offset"):
        total += float(np.abs(getattr(pred, name) - getattr(target, name)).sum())
    return total


def regression_3d_loss(
    pred_dims_hwl: np.ndarray,
    orientation: OrientationPrediction,
    gt_dims_hwl: np.ndarray,
    gt_angle: float,
) -> float:
    """L1 on metric box dimensions plus the multi-bin orientation loss."""
    pred_dims = np.asarray(pred_dims_hwl, dtype=np.float64).reshape(3)
    gt_dims = np.asarray(gt_dims_hwl, dtype=np.float64).reshape(3)
    return float(np.abs(pred_dims - gt_dims).sum()) + orientation_loss(orientation, gt_angle)


def depth_map_loss(
    pred_probs: np.ndarray, target: BinTargetMap, fp: FocalParams = FocalParams()
) -> float:
    """Per-cell focal loss of bin probabilities vs one-hot targets.

    Summed over the K bins per cell, averaged over valid cells only.  A map
    with no valid cells contributes 0 (with a warning).
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    if pred_probs.ndim != 3 or pred_probs.shape[:2] != target.targets.shape:
        raise ValueError(
            f"prediction {pred_probs.shape} does not match targets "
            f"{target.targets.shape}"
        )
    n_bins = pred_probs.shape[2]
    if not target.valid.any():
        warnings.warn("depth-map loss over a map with no valid cells", stacklevel=2)
        return 0.0
    tgt = target.targets[target.valid]
    if tgt.min() < 0 or tgt.max() >= n_bins:
        raise ValueError(f"targets outside [0, {n_bins})")
    p = pred_probs[target.valid]
    onehot = np.zeros_like(p)
    onehot[np.arange(len(tgt)), tgt] = 1.0
    per_cell = focal_loss(p, onehot, fp, reduction="none").sum(axis=1)
    return float(per_cell.mean())


def disparity_loss(
    pred_logits: np.ndarray, gt_disparity: np.ndarray, valid: np.ndarray
) -> float:
    """Cross-entropy between disparity logits and rounded integer targets.

    pred_logits is (h, w, D); ground-truth disparities must lie in [0, D)
    wherever valid and are rounded to the nearest bin (capped at D - 1).
    Averaged over valid pixels; no valid pixels contributes 0 with a warning.
    """
    z = np.asarray(pred_logits, dtype=np.float64)
    gt = np.asarray(gt_disparity, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if z.ndim != 3 or z.shape[:2] != gt.shape or gt.shape != valid.shape:
        raise ValueError(
            f"shape mismatch: logits {z.shape}, disparity {gt.shape}, valid {valid.shape}"
        )
    if not valid.any():
        warnings.warn("disparity loss over a map with no valid pixels", stacklevel=2)
        return 0.0
    d = z.shape[2]
    gt_v = gt[valid]
    if gt_v.min() < 0.0 or gt_v.max() >= d:
        raise ValueError(f"valid disparities must lie in [0, {d})")
    bins = np.minimum(np.round(gt_v).astype(np.int64), d - 1)
    zv = z[valid]
    zmax = zv.max(axis=1, keepdims=True)
    log_softmax = zv - zmax - np.log(np.exp(zv - zmax).sum(axis=1, keepdims=True))
    return float(-log_softmax[np.arange(len(bins)), bins].mean())


@dataclass(frozen=True)
class LossBreakdown:
    """Aggregated frame loss; the four object terms are pre-normalization sums."""

    cls: float
    reg_2d: float
    reg_3d: float
    depth_obj: float
    n_matched: int
    depth_map: float
    disparity: float
    objects: float
    total: float


def total_loss(
    cls: float,
    reg_2d: float,
    reg_3d: float,
    depth_obj: float,
    depth_map: float,
    disparity: float,
    n_matched: int,
) -> LossBreakdown:
    """objects = (cls + reg_2d + reg_3d + depth_obj) / n_matched; total adds
    the two dense-map terms unnormalized.

    n_matched is the number of matched prediction/ground-truth pairs and must
    be at least 1; frames without matchable objects have no object loss to
    aggregate in the first place.
    """
    if n_matched < 1:
        raise ValueError(f"n_matched must be >= 1, got {n_matched}")
    objects = (cls + reg_2d + reg_3d + depth_obj) / n_matched
    total = objects + depth_map + disparity
    return LossBreakdown(
        cls=cls,
        reg_2d=reg_2d,
        reg_3d=reg_3d,
        depth_obj=depth_obj,
        n_matched=n_matched,
        depth_map=depth_map,
        disparity=disparity,
        objects=objects,
        total=total,
    )
