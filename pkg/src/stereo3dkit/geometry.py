"""Box geometry for camera-frame 3D detection.

Conventions follow the KITTI camera frame: x right, y down, z forward.
3D boxes are stored at their geometric center; KITTI label files place the
origin at the bottom face, so use :func:`box3d_from_label` when converting.
Bird's-eye-view (BEV) polygons live in the (x, z) ground plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Polygon areas below this are treated as empty intersections.
AREA_EPS = 1e-12


class BehindCameraError(ValueError):
    """Raised when projecting a point at or behind the image plane (z <= 0)."""


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image-plane box, corner form (x1, y1) top-left inclusive."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(
                f"box corners out of order: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(eq=False)
class Box3D:
    """Oriented 3D box: geometric center, dims (h, w, l), yaw about the y axis.

    h spans the vertical (y) axis, l the heading (x before rotation), w the
    lateral axis.  yaw is the KITTI rotation_y angle in radians.
    """

    center: np.ndarray
    dims_hwl: np.ndarray
    yaw: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims_hwl = np.asarray(self.dims_hwl, dtype=np.float64).reshape(3)
        if np.any(self.dims_hwl < 0):
            raise ValueError(f"negative box dimensions: {self.dims_hwl}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims_hwl))

    def y_interval(self) -> tuple[float, float]:
        """Vertical extent (y grows downward) as (y_low, y_high), y_low <= y_high."""
        half = 0.5 * self.dims_hwl[0]
        return (self.center[1] - half, self.center[1] + half)


def box3d_from_label(location_xyz, dims_hwl, rotation_y: float) -> Box3D:
    """Build a :class:`Box3D` from KITTI label fields.

    KITTI stores the bottom-face center; y points down, so the geometric
    center sits half a height above (smaller y).
    """
    loc = np.asarray(location_xyz, dtype=np.float64).reshape(3)
    dims = np.asarray(dims_hwl, dtype=np.float64).reshape(3)
    center = loc.copy()
    center[1] = loc[1] - 0.5 * dims[0]
    return Box3D(center=center, dims_hwl=dims, yaw=float(rotation_y))


def project_point(p_matrix: np.ndarray, xyz) -> tuple[float, float]:
    """Project a camera-frame point through a 3x4 projection matrix.

    Returns continuous pixel coordinates (u, v).  Points at or behind the
    image plane cannot be projected.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(3)
    if xyz[2] <= 0.0:
        raise BehindCameraError(f"point behind camera: z={xyz[2]}")
    p = np.asarray(p_matrix, dtype=np.float64)
    uvw = p @ np.append(xyz, 1.0)
    if uvw[2] <= 0.0:
        raise BehindCameraError(f"projective depth not positive: {uvw[2]}")
    return (float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]))


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Intersection over union of two image boxes; degenerate boxes give 0."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_2d(a: Box2D, b: Box2D) -> float:
    """Generalized IoU in [-1, 1]: IoU minus enclosing-box slack."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    ex = max(a.x2, b.x2) - min(a.x1, b.x1)
    ey = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclose = ex * ey
    if enclose <= 0.0:
        # All-degenerate input; treat identical points as perfect overlap.
        return 0.0
    iou = inter / union if union > 0.0 else 0.0
    return iou - (enclose - union) / enclose


def bev_corners(box: Box3D) -> np.ndarray:
    """Ground-plane footprint as a (4, 2) array of (x, z) corners, CCW order."""
    h, w, l = box.dims_hwl
    # Object frame: heading along +x (length), lateral along +z (width).
    xs = np.array([l, -l, -l, l]) * 0.5
    zs = np.array([w, w, -w, -w]) * 0.5
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = xs * c + zs * s + box.center[0]
    z = -xs * s + zs * c + box.center[2]
    return np.stack([x, z], axis=1)


def polygon_area(poly: np.ndarray) -> float:
    """Absolute shoelace area of a simple polygon given as (n, 2) vertices."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject against a convex CCW clip polygon."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ez = b[0] - a[0], b[1] - a[1]

        def inside(p):
            return ex * (p[1] - a[1]) - ez * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            # Line through a-b vs segment p-q.
            dpx, dpz = q[0] - p[0], q[1] - p[1]
            denom = ex * dpz - ez * dpx
            num = ex * (a[1] - p[1]) - ez * (a[0] - p[0])
            t = num / denom
            return (p[0] + t * dpx, p[1] + t * dpz)

        nxt = []
        m = len(out)
        for j in range(m):
            cur, prev = out[j], out[j - 1]
            cur_in, prev_in = inside(cur), inside(prev)
            if cur_in:
                if not prev_in:
                    nxt.append(intersect(prev, cur))
                nxt.append(cur)
            elif prev_in:
                nxt.append(intersect(prev, cur))
        out = nxt
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the rotated ground-plane footprints."""
    pa, pb = bev_corners(a), bev_corners(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    inter = polygon_area(clip_convex_polygon(pa, pb))
    if inter < AREA_EPS:
        inter = 0.0
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    return inter / union


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection extruded over the vertical overlap."""
    pa, pb = bev_corners(a), bev_corners(b)
    inter_area = polygon_area(clip_convex_polygon(pa, pb))
    if inter_area < AREA_EPS:
        inter_area = 0.0
    ya0, ya1 = a.y_interval()
    yb0, yb1 = b.y_interval()
    y_overlap = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    inter = inter_area * y_overlap
    union = a.volume + b.volume - inter
    if union <= AREA_EPS:
        return 0.0
    return inter / union


def absolute_from_projected_scale(
    projected_hw: tuple[float, float], depth: float, focal: float
) -> tuple[float, float]:
    """Recover metric (height, width) from projected pixel size via the pinhole model.

    Inverse of size / depth scaling: s_metric = s_pixels * depth / focal.
    """
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    if focal <= 0.0:
        raise ValueError(f"focal length must be positive, got {focal}")
    ph, pw = projected_hw
    return (ph * depth / focal, pw * depth / focal)
