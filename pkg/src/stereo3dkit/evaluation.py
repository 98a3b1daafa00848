"""KITTI-protocol average precision at 40 recall positions.

Per frame, detections are matched greedily in score order against same-class
ground truth; a ground-truth object can be claimed once.  Objects outside
the difficulty bucket are ignored rather than counted: detections landing on
them (or on DontCare regions) are neither true nor false positives.  The PR
curve is swept over all distinct detection scores, and AP is the mean of
right-interpolated precision at recalls {1/40, ..., 40/40}, as a percentage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import Box2D, Box3D, box3d_from_label, iou_2d, iou_3d, iou_bev
from .kitti_io import Difficulty, ObjectLabel, classify_difficulty, parse_label_file

METRICS = ("3d", "bev", "2d")
DIFFICULTIES = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)

DEFAULT_IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
DEFAULT_CLASSES = ("Car", "Pedestrian", "Cyclist")


class EvaluationError(ValueError):
    pass


@dataclass(eq=False)
class Detection:
    class_name: str
    box2d: Box2D
    box3d: Box3D | None
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


def detection_from_label(label: ObjectLabel) -> Detection:
    """Convert a scored label row into a Detection (3D box lifted to center)."""
    if label.score is None:
        raise EvaluationError(f"prediction for {label.class_name} lacks a score field")
    box3d = None
    if not label.is_dontcare:
        box3d = box3d_from_label(label.location_xyz, label.dims_hwl, label.rotation_y)
    return Detection(
        class_name=label.class_name, box2d=label.box2d, box3d=box3d, score=label.score
    )


@dataclass(eq=False)
class FrameMatch:
    """Outcome flags per detection and per ground-truth object."""

    det_tp: np.ndarray
    det_neutral: np.ndarray
    gt_matched: np.ndarray
    gt_ignored: np.ndarray

    @property
    def det_fp(self) -> np.ndarray:
        return ~(self.det_tp | self.det_neutral)


def _intersection_over_det(det_box: Box2D, region: Box2D) -> float:
    ix = min(det_box.x2, region.x2) - max(det_box.x1, region.x1)
    iy = min(det_box.y2, region.y2) - max(det_box.y1, region.y1)
    if ix <= 0.0 or iy <= 0.0 or det_box.area <= 0.0:
        return 0.0
    return ix * iy / det_box.area


def match_frame(
    dets: Sequence[Detection],
    gts: Sequence[ObjectLabel],
    gt_ignored: np.ndarray,
    overlap_fn: Callable[[Detection, ObjectLabel], float],
    iou_threshold: float,
    dontcare_boxes: Sequence[Box2D] = (),
) -> FrameMatch:
    """Greedy score-order matching of one frame's same-class detections.

    Each detection takes the highest-overlap unmatched non-ignored ground
    truth at or above the threshold (ties to the lowest index).  Unmatched
    detections overlapping an ignored ground truth at the threshold, or a
    DontCare region at the threshold under the 2D intersection/det-area
    rule, are neutral; the rest are false positives.
    """
    n, m = len(dets), len(gts)
    gt_ignored = np.asarray(gt_ignored, dtype=bool).reshape(m)
    det_tp = np.zeros(n, dtype=bool)
    det_neutral = np.zeros(n, dtype=bool)
    gt_matched = np.zeros(m, dtype=bool)

    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    for i in order:
        best_ov = -1.0
        best_j = -1
        for j in range(m):
            if gt_ignored[j] or gt_matched[j]:
                continue
            ov = overlap_fn(dets[i], gts[j])
            if ov >= iou_threshold and ov > best_ov:
                best_ov = ov
                best_j = j
        if best_j >= 0:
            det_tp[i] = True
            gt_matched[best_j] = True
            continue
        neutral = any(
            overlap_fn(dets[i], gts[j]) >= iou_threshold
            for j in range(m)
            if gt_ignored[j]
        )
        if not neutral:
            neutral = any(
                _intersection_over_det(dets[i].box2d, dc) >= iou_threshold
                for dc in dontcare_boxes
            )
        det_neutral[i] = neutral
    return FrameMatch(
        det_tp=det_tp,
        det_neutral=det_neutral,
        gt_matched=gt_matched,
        gt_ignored=gt_ignored.copy(),
    )


def ap_r40(outcomes: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """AP from (score, is_tp) pairs of counted detections against n_gt >= 1.

    The PR curve is evaluated after each distinct score level (whole tie
    groups enter together, so input order of equal scores cannot matter).
    """
    if n_gt < 1:
        raise EvaluationError(f"AP undefined for n_gt={n_gt}")
    if not outcomes:
        return 0.0
    scores = np.array([s for s, _ in outcomes], dtype=np.float64)
    flags = np.array([bool(t) for _, t in outcomes], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    # Indices closing each distinct-score group.
    group_end = np.nonzero(np.diff(scores, append=-np.inf))[0]
    cum_tp = np.cumsum(flags)[group_end]
    cum_fp = np.cumsum(~flags)[group_end]
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    # Max precision at or to the right of each curve point.
    rmax = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, 41):
        r = k / 40.0
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < len(recall):
            total += float(rmax[idx])
    return total / 40.0 * 100.0


@dataclass(frozen=True)
class APCell:
    """One table entry: AP (None when no ground truth) and final-point counts."""

    ap: float | None
    n_gt: int
    tp: int
    fp: int
    fn: int


@dataclass(eq=False)
class APResult:
    classes: tuple[str, ...]
    metrics: tuple[str, ...]
    iou_thresholds: dict[str, float]
    cells: dict[tuple[str, Difficulty, str], APCell]

    def cell(self, class_name: str, difficulty: Difficulty, metric: str) -> APCell:
        return self.cells[(class_name, difficulty, metric)]

    def to_json_dict(self) -> dict:
        out: dict = {"iou_thresholds": dict(self.iou_thresholds), "classes": {}}
        for c in self.classes:
            per_metric: dict = {}
            for met in self.metrics:
                per_diff = {}
                for lvl in DIFFICULTIES:
                    cell = self.cells[(c, lvl, met)]
                    per_diff[lvl.name.lower()] = {
                        "ap": cell.ap,
                        "n_gt": cell.n_gt,
                        "tp": cell.tp,
                        "fp": cell.fp,
                        "fn": cell.fn,
                    }
                per_metric[met] = per_diff
            out["classes"][c] = per_metric
        return out


def format_ap_table(result: APResult) -> str:
    """Aligned text table: one row per class x metric, Easy/Moderate/Hard columns."""
    header = f"{'Class':<12} {'Metric':<7} {'Easy':>8} {'Moderate':>8} {'Hard':>8}"
    lines = [header, "-" * len(header)]
    for c in result.classes:
        for met in result.metrics:
            vals = []
            for lvl in DIFFICULTIES:
                cell = result.cells[(c, lvl, met)]
                vals.append("   -    " if cell.ap is None else f"{cell.ap:8.2f}")
            thr = result.iou_thresholds[c]
            lines.append(f"{c:<12} {met.upper():<7} {vals[0]} {vals[1]} {vals[2]}  (IoU>={thr})")
    return "\n".join(lines)


def _overlap_fn(metric: str) -> Callable[[Detection, ObjectLabel], float]:
    if metric == "2d":
        return lambda det, gt: iou_2d(det.box2d, gt.box2d)
    if metric == "bev":
        return lambda det, gt: iou_bev(det.box3d, _gt_box3d(gt))
    if metric == "3d":
        return lambda det, gt: iou_3d(det.box3d, _gt_box3d(gt))
    raise EvaluationError(f"unknown metric {metric!r}")


_GT_BOX_CACHE: dict[int, Box3D] = {}


def _gt_box3d(gt: ObjectLabel) -> Box3D:
    box = _GT_BOX_CACHE.get(id(gt))
    if box is None:
        box = box3d_from_label(gt.location_xyz, gt.dims_hwl, gt.rotation_y)
        _GT_BOX_CACHE[id(gt)] = box
    return box


def evaluate_frames(
    frames: Sequence[tuple[Sequence[Detection], Sequence[ObjectLabel]]],
    classes: Sequence[str] = DEFAULT_CLASSES,
    metrics: Sequence[str] = METRICS,
    iou_thresholds: Mapping[str, float] | None = None,
) -> APResult:
    """Evaluate in-memory frames; see module docstring for the protocol."""
    thresholds = dict(DEFAULT_IOU_THRESHOLDS)
    if iou_thresholds:
        thresholds.update(iou_thresholds)
    for c in classes:
        if c not in thresholds:
            raise EvaluationError(f"no IoU threshold configured for class {c!r}")
    for met in metrics:
        if met not in METRICS:
            raise EvaluationError(f"unknown metric {met!r}")

    _GT_BOX_CACHE.clear()
    cells: dict[tuple[str, Difficulty, str], APCell] = {}
    for c in classes:
        thr = thresholds[c]
        per_frame = []
        for dets, gts in frames:
            dets_c = [d for d in dets if d.class_name == c]
            gts_c = [g for g in gts if g.class_name == c]
            dontcare = [g.box2d for g in gts if g.is_dontcare]
            diffs = [classify_difficulty(g) for g in gts_c]
            per_frame.append((dets_c, gts_c, dontcare, diffs))
        for met in metrics:
            ov = _overlap_fn(met)
            for lvl in DIFFICULTIES:
                outcomes: list[tuple[float, bool]] = []
                n_gt = tp = fp = 0
                for dets_c, gts_c, dontcare, diffs in per_frame:
                    ignored = np.array([d > lvl for d in diffs], dtype=bool)
                    n_gt += int((~ignored).sum()) if len(gts_c) else 0
                    fm = match_frame(dets_c, gts_c, ignored, ov, thr, dontcare)
                    counted = ~fm.det_neutral
                    tp += int(fm.det_tp.sum())
                    fp += int((fm.det_fp).sum())
                    outcomes.extend(
                        (dets_c[i].score, bool(fm.det_tp[i]))
                        for i in range(len(dets_c))
                        if counted[i]
                    )
                ap = ap_r40(outcomes, n_gt) if n_gt >= 1 else None
                cells[(c, lvl, met)] = APCell(
                    ap=ap, n_gt=n_gt, tp=tp, fp=fp, fn=n_gt - tp
                )
    _GT_BOX_CACHE.clear()
    return APResult(
        classes=tuple(classes),
        metrics=tuple(metrics),
        iou_thresholds=thresholds,
        cells=cells,
    )


def evaluate_benchmark(
    pred_dir,
    gt_dir,
    classes: Sequence[str] = DEFAULT_CLASSES,
    metrics: Sequence[str] = METRICS,
    iou_thresholds: Mapping[str, float] | None = None,
) -> tuple[APResult, list[str]]:
    """Evaluate directories of per-frame KITTI files.

    Frames present in only one directory are skipped and returned as the
    second element so the caller can report them (and exit nonzero).
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids = {p.stem for p in pred_dir.glob("*.txt")}
    gt_ids = {p.stem for p in gt_dir.glob("*.txt")}
    skipped = sorted(pred_ids ^ gt_ids)
    common = sorted(pred_ids & gt_ids)
    frames = []
    for fid in common:
        dets = [detection_from_label(lb) for lb in parse_label_file(pred_dir / f"{fid}.txt")]
        gts = parse_label_file(gt_dir / f"{fid}.txt")
        frames.append((dets, gts))
    return evaluate_frames(frames, classes, metrics, iou_thresholds), skipped
