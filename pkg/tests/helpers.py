"""Shared factories and brute-force oracles for the test suite."""

import itertools

import numpy as np
from PIL import Image

from stereo3dkit.geometry import Box2D, bev_corners
from stereo3dkit.kitti_io import (
    CameraCalib,
    ObjectLabel,
    serialize_calib,
    serialize_labels,
)


def make_calib(focal=707.0, cx=604.0, cy=180.0, baseline=0.54):
    """Rectified stereo pair: identical intrinsics, right camera offset."""
    p2 = np.array([
        [focal, 0.0, cx, 0.0],
        [0.0, focal, cy, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    p3 = p2.copy()
    p3[0, 3] = -focal * baseline
    return CameraCalib(p2=p2, p3=p3)


def make_label(class_name="Car", box=(100.0, 100.0, 180.0, 148.0), trunc=0.0,
               occ=0, alpha=0.0, dims=(1.5, 1.6, 3.9), loc=(0.0, 1.65, 20.0),
               ry=0.0, score=None):
    return ObjectLabel(
        class_name=class_name,
        truncation=trunc,
        occlusion=occ,
        alpha=alpha,
        box2d=Box2D(*box),
        dims_hwl=tuple(float(d) for d in dims),
        location_xyz=tuple(float(v) for v in loc),
        rotation_y=ry,
        score=score,
    )


def make_dontcare(box):
    return ObjectLabel(
        class_name="DontCare",
        truncation=-1.0,
        occlusion=-1,
        alpha=-10.0,
        box2d=Box2D(*box),
        dims_hwl=(-1.0, -1.0, -1.0),
        location_xyz=(-1000.0, -1000.0, -1000.0),
        rotation_y=-10.0,
        score=None,
    )


def label_at(u, v, z, box, calib, dims=(1.5, 1.7, 4.0), **kw):
    """Label whose 3D geometric center projects exactly to image point (u, v).

    Assumes a zero-translation P2 (the make_calib default).
    """
    f = calib.p2[0, 0]
    cx = calib.p2[0, 2]
    cy = calib.p2[1, 2]
    x = (u - cx) * z / f
    y_center = (v - cy) * z / f
    loc = (x, y_center + dims[0] / 2.0, z)
    return make_label(box=box, dims=dims, loc=loc, **kw)


def write_kitti_tree(root, split, frames):
    """Lay out image_2/image_3/calib/label_2 dirs under root/split.

    frames: list of (frame_id, left, right, calib, labels). Image arrays are
    uint8 grayscale; labels may be None to skip the file.
    """
    base = root / split
    for sub in ("image_2", "image_3", "calib", "label_2"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for frame_id, left, right, calib, labels in frames:
        Image.fromarray(left.astype(np.uint8)).save(base / "image_2" / f"{frame_id}.png")
        Image.fromarray(right.astype(np.uint8)).save(base / "image_3" / f"{frame_id}.png")
        (base / "calib" / f"{frame_id}.txt").write_text(serialize_calib(calib))
        if labels is not None:
            (base / "label_2" / f"{frame_id}.txt").write_text(serialize_labels(labels))
    return base


def brute_assignment(cost, tol=1e-9):
    """Exhaustive min-cost assignment of all columns to distinct rows.

    Ties within tol of the optimum resolve to the lexicographically smallest
    sorted (row, col) pair tuple. Returns (pairs, total).
    """
    cost = np.asarray(cost, dtype=float)
    n_pred, n_gt = cost.shape
    best_total = np.inf
    for rows in itertools.permutations(range(n_pred), n_gt):
        t = sum(cost[r, c] for c, r in enumerate(rows))
        if t < best_total:
            best_total = t
    best_pairs = None
    for rows in itertools.permutations(range(n_pred), n_gt):
        t = sum(cost[r, c] for c, r in enumerate(rows))
        if t <= best_total + tol:
            pairs = tuple(sorted((r, c) for c, r in enumerate(rows)))
            if best_pairs is None or pairs < best_pairs:
                best_pairs = pairs
    return best_pairs, best_total


def best_rect_oracle(mask):
    """Exhaustive max-vertical-span rectangle: try every column interval.

    Maximizes (height, width, -c0, -r0); returns (r0, c0, r1, c1) half-open
    or None. Quadratic in width, linear in height; fine for small masks.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    best = None
    for c0 in range(w):
        acc = np.ones(h, dtype=bool)
        for c1 in range(c0, w):
            acc &= mask[:, c1]
            run = 0
            for r in range(h + 1):
                if r < h and acc[r]:
                    run += 1
                    continue
                if run > 0:
                    cand = (run, c1 - c0 + 1, -c0, -(r - run))
                    if best is None or cand > best:
                        best = cand
                run = 0
    if best is None:
        return None
    height, width, neg_c0, neg_r0 = best
    r0, c0 = -neg_r0, -neg_c0
    return (r0, c0, r0 + height, c0 + width)


def points_in_convex(poly, pts):
    """Membership test against a CCW convex polygon, boundary inclusive."""
    inside = np.ones(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cross = (bx - ax) * (pts[:, 1] - ay) - (by - ay) * (pts[:, 0] - ax)
        inside &= cross >= 0.0
    return inside


def mc_iou_bev(box_a, box_b, n_samples, rng):
    """Monte Carlo ground-plane IoU over the joint bounding box."""
    pa = bev_corners(box_a)
    pb = bev_corners(box_b)
    allp = np.vstack([pa, pb])
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))
    in_a = points_in_convex(pa, pts)
    in_b = points_in_convex(pb, pts)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b)) / union


def build_occlusion_scene(rng, spec):
    """Synthetic scene with one partially occluded object.

    Image 160x512 at map scale 0.25 (4 px cells). Three slots hold: a lone
    object, a target plus a nearer occluder that hides the target's center
    column while leaving a two-cell strip visible, and another lone object.
    All boxes snap to the 4 px cell grid and every depth sits exactly on a
    bin center, at least three bins from its neighbours in the scene.

    Returns (labels, calib, image_hw, entries) with entries listing
    (label, bin_index, occluded_flag) for all four objects.
    """
    from stereo3dkit.depth_label import lid_bin_centers

    image_hw = (160, 512)
    calib = make_calib(focal=400.0, cx=256.0, cy=80.0, baseline=0.54)
    centers = lid_bin_centers(spec)
    bins = np.sort(rng.choice(np.arange(4, spec.n_bins - 4), size=4, replace=False))
    bin_occ, bin_a, bin_b, bin_target = (int(b) for b in bins)

    def snapped_box(slot, min_w_cells, max_w_cells):
        x_lo = 16 + slot * 128
        wc = int(rng.integers(min_w_cells, max_w_cells + 1))
        x1 = x_lo + 4 * int(rng.integers(0, (112 - 4 * wc) // 4 + 1))
        hc = int(rng.integers(8, 15))
        y1 = 4 * int(rng.integers(3, (148 - 4 * hc) // 4 + 1))
        return (float(x1), float(y1), float(x1 + 4 * wc), float(y1 + 4 * hc))

    def centered(box, z, occ=0):
        u = (box[0] + box[2]) / 2.0
        v = (box[1] + box[3]) / 2.0
        return label_at(u, v, z, box, calib, occ=occ)

    box_a = snapped_box(0, 6, 12)
    box_t = snapped_box(1, 10, 14)
    box_b = snapped_box(2, 6, 12)
    # Occluder hides everything right of a 2-cell strip, taller than the target.
    box_o = (box_t[0] + 8.0, max(box_t[1] - 4.0, 0.0),
             box_t[2], min(box_t[3] + 4.0, 160.0))

    lab_a = centered(box_a, float(centers[bin_a]))
    lab_t = centered(box_t, float(centers[bin_target]), occ=1)
    lab_b = centered(box_b, float(centers[bin_b]))
    lab_o = centered(box_o, float(centers[bin_occ]))
    labels = [lab_a, lab_o, lab_t, lab_b]
    entries = [
        (lab_a, bin_a, False),
        (lab_o, bin_occ, False),
        (lab_t, bin_target, True),
        (lab_b, bin_b, False),
    ]
    return labels, calib, image_hw, entries


def planted_eval_fixture():
    """Five hand-built frames with a fully worked AP table.

    Car-only detections at IoU threshold 0.7. Scored detections copy their
    ground-truth boxes exactly, so every matched overlap is 1.0:

      frame 1: easy gt A, matched at score 0.9            -> TP
      frame 2: easy gt B, no detection                    -> FN
      frame 3: lone detection at 0.8, overlaps nothing    -> FP
      frame 4: moderate gt C (occlusion 1), matched 0.7   -> TP above easy
      frame 5: undersized gt D (ignored) matched at 0.6 and a detection at
               0.55 inside a DontCare region              -> both neutral

    Every metric sees identical geometry, so the expected table is shared.
    """
    lab_a = make_label(box=(100, 100, 180, 148), loc=(-5.0, 1.6, 12.0),
                       dims=(1.5, 1.7, 4.2), ry=0.3)
    lab_b = make_label(box=(300, 100, 380, 145), loc=(4.0, 1.5, 18.0),
                       dims=(1.6, 1.8, 4.0), ry=-0.5)
    lab_c = make_label(box=(500, 100, 560, 130), occ=1, loc=(8.0, 1.4, 30.0),
                       dims=(1.4, 1.6, 3.6), ry=1.0)
    lab_d = make_label(box=(700, 100, 740, 120), loc=(-10.0, 1.3, 45.0),
                       dims=(1.5, 1.6, 3.9))
    dontcare = make_dontcare((600, 200, 680, 260))

    def det(label, score):
        return make_label(box=(label.box2d.x1, label.box2d.y1,
                               label.box2d.x2, label.box2d.y2),
                          loc=label.location_xyz, dims=label.dims_hwl,
                          ry=label.rotation_y, score=score)

    det_fp = make_label(box=(50, 200, 130, 260), loc=(20.0, 1.5, 50.0),
                        dims=(1.5, 1.6, 3.8), score=0.8)
    det_dc = make_label(box=(620, 210, 660, 250), loc=(0.0, 1.5, 55.0),
                        dims=(1.5, 1.6, 3.8), score=0.55)

    frames = [
        ([det(lab_a, 0.9)], [lab_a]),
        ([], [lab_b]),
        ([det_fp], []),
        ([det(lab_c, 0.7)], [lab_c]),
        ([det(lab_d, 0.6), det_dc], [lab_d, dontcare]),
    ]
    # 40-point interpolation: easy has outcomes (TP, FP) over 2 gts; the
    # harder tiers add a TP at the lowest score over 3 gts.
    ap_easy = 100.0 * 20.0 / 40.0
    ap_hard = 100.0 * (13.0 + 13.0 * (2.0 / 3.0)) / 40.0
    expected = {
        "EASY": dict(ap=ap_easy, n_gt=2, tp=1, fp=1, fn=1),
        "MODERATE": dict(ap=ap_hard, n_gt=3, tp=2, fp=1, fn=1),
        "HARD": dict(ap=ap_hard, n_gt=3, tp=2, fp=1, fn=1),
    }
    return frames, expected
