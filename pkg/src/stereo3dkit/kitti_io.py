"""KITTI object-benchmark file I/O.

Covers the three text formats (labels, detections with score, calibration)
plus the stereo-pair preprocessing step (top crop + bilinear resize) with the
matching exact projection-matrix update.  Camera frame: x right, y down,
z forward; all distances in meters, image coordinates in pixels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box2D

KNOWN_CLASSES = (
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
)

DONTCARE = "DontCare"

# Default preprocessing used throughout: drop 100 sky rows, resize to a
# 16-divisible resolution so the strided feature maps line up.
DEFAULT_CROP_TOP = 100
DEFAULT_TARGET_HW = (288, 1280)


class LabelFormatError(ValueError):
    """Malformed label line; message carries file and line number."""


class CalibFormatError(ValueError):
    """Missing or malformed calibration entries."""


class Difficulty(enum.IntEnum):
    """KITTI difficulty buckets; order matters (valid at level L iff value <= L)."""

    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


@dataclass
class ObjectLabel:
    """One row of a KITTI label/detection file.

    dims_hwl is (height, width, length) in meters; location_xyz is the
    bottom-face center in the camera frame.  DontCare rows keep their -1/-10
    sentinels untouched.  score is present only for detection files.
    """

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: Box2D
    dims_hwl: tuple[float, float, float]
    location_xyz: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == DONTCARE

    @property
    def depth(self) -> float:
        return self.location_xyz[2]


@dataclass(frozen=True, eq=False)
class CameraCalib:
    """Left/right rectified projection matrices (P2/P3) with derived intrinsics."""

    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self) -> None:
        for name in ("p2", "p3"):
            mat = np.asarray(getattr(self, name), dtype=np.float64)
            if mat.shape != (3, 4):
                raise CalibFormatError(f"{name} must be 3x4, got {mat.shape}")
            # Projection matrices are homogeneous; rescale so mat[2, 2] == 1
            # and the derived intrinsics read straight off the entries.
            if abs(mat[2, 2]) < 1e-12:
                raise CalibFormatError(f"{name}[2][2] is zero, cannot normalize")
            object.__setattr__(self, name, mat / mat[2, 2])
        if self.focal <= 0.0:
            raise CalibFormatError(f"focal length must be positive, got {self.focal}")
        if self.baseline <= 0.0:
            raise CalibFormatError(
                f"baseline must be positive, got {self.baseline}; "
                "check P2/P3 ordering"
            )

    @property
    def focal(self) -> float:
        return float(self.p2[0, 0])

    @property
    def cx(self) -> float:
        return float(self.p2[0, 2])

    @property
    def cy(self) -> float:
        return float(self.p2[1, 2])

    @property
    def baseline(self) -> float:
        """Stereo baseline in meters: (P2[0,3] - P3[0,3]) / focal."""
        return float((self.p2[0, 3] - self.p3[0, 3]) / self.p2[0, 0])


def _parse_label_line(line: str, where: str) -> ObjectLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise LabelFormatError(f"{where}: expected 15 or 16 fields, got {len(parts)}")
    name = parts[0]
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise LabelFormatError(f"{where}: non-numeric field ({exc})") from None
    trunc, occ_f, alpha = vals[0], vals[1], vals[2]
    x1, y1, x2, y2 = vals[3:7]
    h, w, l = vals[7:10]
    x, y, z = vals[10:13]
    ry = vals[13]
    score = vals[14] if len(vals) == 15 else None

    if occ_f != int(occ_f):
        raise LabelFormatError(f"{where}: occlusion must be integral, got {occ_f}")
    occ = int(occ_f)
    dontcare = name == DONTCARE
    if dontcare:
        if not (trunc == -1.0 or 0.0 <= trunc <= 1.0):
            raise LabelFormatError(f"{where}: bad DontCare truncation {trunc}")
    else:
        if not 0.0 <= trunc <= 1.0:
            raise LabelFormatError(f"{where}: truncation {trunc} outside [0, 1]")
        if occ not in (0, 1, 2, 3):
            raise LabelFormatError(f"{where}: occlusion {occ} not in {{0,1,2,3}}")
        if not -np.pi - 1e-6 <= alpha <= np.pi + 1e-6:
            raise LabelFormatError(f"{where}: alpha {alpha} outside [-pi, pi]")
        if not -np.pi - 1e-6 <= ry <= np.pi + 1e-6:
            raise LabelFormatError(f"{where}: rotation_y {ry} outside [-pi, pi]")
        if min(h, w, l) <= 0.0:
            raise LabelFormatError(f"{where}: non-positive dimensions {(h, w, l)}")
        if x1 >= x2 or y1 >= y2:
            raise LabelFormatError(
                f"{where}: degenerate box ({x1}, {y1}, {x2}, {y2})"
            )
    try:
        box = Box2D(x1, y1, x2, y2)
    except ValueError as exc:
        raise LabelFormatError(f"{where}: {exc}") from None
    return ObjectLabel(
        class_name=name,
        truncation=trunc,
        occlusion=occ,
        alpha=alpha,
        box2d=box,
        dims_hwl=(h, w, l),
        location_xyz=(x, y, z),
        rotation_y=ry,
        score=score,
    )


def parse_label_file(path) -> list[ObjectLabel]:
    """Parse a KITTI label or detection file; blank lines are skipped."""
    path = Path(path)
    labels = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            labels.append(_parse_label_line(line, f"{path.name}:{lineno}"))
    return labels


def serialize_label(label: ObjectLabel) -> str:
    """Render one label in the canonical fixed-precision row format."""
    parts = [
        label.class_name,
        f"{label.truncation:.2f}",
        str(int(label.occlusion)),
        f"{label.alpha:.2f}",
        f"{label.box2d.x1:.2f}",
        f"{label.box2d.y1:.2f}",
        f"{label.box2d.x2:.2f}",
        f"{label.box2d.y2:.2f}",
        f"{label.dims_hwl[0]:.2f}",
        f"{label.dims_hwl[1]:.2f}",
        f"{label.dims_hwl[2]:.2f}",
        f"{label.location_xyz[0]:.2f}",
        f"{label.location_xyz[1]:.2f}",
        f"{label.location_xyz[2]:.2f}",
        f"{label.rotation_y:.2f}",
    ]
    if label.score is not None:
        parts.append(f"{label.score:.2f}")
    return " ".join(parts)


def serialize_labels(labels, path=None) -> str:
    """Serialize labels one per line; optionally write to path.  Round-trips
    byte-identically with :func:`parse_label_file` on canonical files."""
    text = "".join(serialize_label(lb) + "\n" for lb in labels)
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_calib_file(path) -> CameraCalib:
    """Read a KITTI calibration file; requires P2 and P3 rows of 12 reals."""
    path = Path(path)
    mats: dict[str, np.ndarray] = {}
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            if not _:
                key, *vals = line.split()
            else:
                vals = rest.split()
            key = key.strip()
            if key not in ("P2", "P3"):
                continue
            if len(vals) != 12:
                raise CalibFormatError(
                    f"{path.name}: {key} needs 12 values, got {len(vals)}"
                )
            try:
                mats[key] = np.array([float(v) for v in vals], dtype=np.float64).reshape(3, 4)
            except ValueError as exc:
                raise CalibFormatError(f"{path.name}: {key}: {exc}") from None
    for key in ("P2", "P3"):
        if key not in mats:
            raise CalibFormatError(f"{path.name}: missing {key}")
    return CameraCalib(p2=mats["P2"], p3=mats["P3"])


def serialize_calib(calib: CameraCalib, path=None) -> str:
    rows = []
    for key, mat in (("P2", calib.p2), ("P3", calib.p3)):
        rows.append(key + ": " + " ".join(f"{v:.12e}" for v in mat.ravel()))
    text = "\n".join(rows) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# (min box height px, max occlusion, max truncation) per difficulty level.
DIFFICULTY_RULES = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


def classify_difficulty(label: ObjectLabel) -> Difficulty:
    """Bucket a ground-truth object by box height, occlusion, and truncation.

    Levels are cumulative: an object valid at EASY is also valid at MODERATE
    and HARD (compare with <= on the enum value).  Objects failing all three
    rule sets are IGNORED.
    """
    height = label.box2d.height
    for level, (min_h, max_occ, max_trunc) in DIFFICULTY_RULES.items():
        if height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


def load_image(path) -> np.ndarray:
    """Load an image as a uint8 array, (h, w) grayscale or (h, w, 3) RGB."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img)


def _resize_bilinear(img: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    th, tw = target_hw
    if img.shape[:2] == (th, tw):
        return img.copy()
    pil = Image.fromarray(img)
    return np.asarray(pil.resize((tw, th), Image.BILINEAR))


def preprocess_pair(
    left: np.ndarray,
    right: np.ndarray,
    calib: CameraCalib,
    crop_top: int = DEFAULT_CROP_TOP,
    target_hw: tuple[int, int] = DEFAULT_TARGET_HW,
) -> tuple[np.ndarray, np.ndarray, CameraCalib]:
    """Crop sky rows off the top, resize both views, and update the calibration.

    The projection update is exact for the crop + axis-aligned scaling:
    row 0 scales by s_x, row 1 becomes (row1 - crop_top * row2) * s_y, row 2
    is unchanged.  Projecting any 3D point through the new matrices lands on
    the transformed pixel location.  The stereo baseline is unchanged.
    crop_top = 0 with target equal to the input is the identity.
    """
    if left.shape != right.shape:
        raise ValueError(f"stereo shapes differ: {left.shape} vs {right.shape}")
    h, w = left.shape[:2]
    if not 0 <= crop_top < h:
        raise ValueError(f"crop_top {crop_top} outside [0, {h})")
    th, tw = target_hw
    if th <= 0 or tw <= 0:
        raise ValueError(f"bad target size {target_hw}")
    if th % 16 or tw % 16:
        raise ValueError(
            f"target dims must be divisible by 16 for the strided features, got {target_hw}"
        )

    left_c = left[crop_top:]
    right_c = right[crop_top:]
    if crop_top == 0 and (th, tw) == (h, w):
        return left.copy(), right.copy(), CameraCalib(p2=calib.p2, p3=calib.p3)

    s_x = tw / w
    s_y = th / (h - crop_top)
    new_mats = []
    for mat in (calib.p2, calib.p3):
        out = mat.copy()
        out[0, :] = mat[0, :] * s_x
        out[1, :] = (mat[1, :] - crop_top * mat[2, :]) * s_y
        new_mats.append(out)
    return (
        _resize_bilinear(left_c, target_hw),
        _resize_bilinear(right_c, target_hw),
        CameraCalib(p2=new_mats[0], p3=new_mats[1]),
    )


@dataclass(frozen=True)
class FramePaths:
    """File locations for one frame under the standard KITTI object layout."""

    left: Path
    right: Path
    calib: Path
    label: Path


def frame_paths(root, split: str, frame_id: str) -> FramePaths:
    base = Path(root) / split
    return FramePaths(
        left=base / "image_2" / f"{frame_id}.png",
        right=base / "image_3" / f"{frame_id}.png",
        calib=base / "calib" / f"{frame_id}.txt",
        label=base / "label_2" / f"{frame_id}.txt",
    )


def list_frame_ids(root, split: str) -> list[str]:
    """Frame ids present under <root>/<split>/image_2, sorted."""
    image_dir = Path(root) / split / "image_2"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no image directory at {image_dir}")
    return sorted(p.stem for p in image_dir.glob("*.png"))


@dataclass
class StereoFrame:
    """A fully loaded frame: both views, calibration, and (optional) labels."""

    frame_id: str
    left: np.ndarray
    right: np.ndarray
    calib: CameraCalib
    labels: list[ObjectLabel]


def load_stereo_frame(root, split: str, frame_id: str, with_labels: bool = True) -> StereoFrame:
    """Load the two images, calibration, and labels for one frame id."""
    paths = frame_paths(root, split, frame_id)
    labels: list[ObjectLabel] = []
    if with_labels and paths.label.is_file():
        labels = parse_label_file(paths.label)
    return StereoFrame(
        frame_id=frame_id,
        left=load_image(paths.left),
        right=load_image(paths.right),
        calib=parse_calib_file(paths.calib),
        labels=labels,
    )
