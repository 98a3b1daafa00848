"""Deterministic core operations for stereo 3D object detection pipelines.

Modules:
    kitti_io      label/calibration parsing, difficulty rules, preprocessing
    geometry      2D/3D boxes, projection, IoU/GIoU, rotated BEV overlap
    stereo_core   correlation volumes, conv kernels, multi-scale fusion, decoders
    weights       float32 binary weight container with JSON manifest
    depth_label   LID depth bins, object depth maps, visibility-aware sampling
    matching      focal/L1/GIoU match costs and Hungarian assignment
    losses        focal, uncertainty depth, orientation, dense map losses
    evaluation    KITTI-protocol AP@R40 tables
    disparity_bm  block-matching disparity ground truth
    report        matplotlib figures and CSV artifacts
    cli           command-line interface
"""

__version__ = "0.1.0"

from .geometry import (
    BehindCameraError,
    Box2D,
    Box3D,
    absolute_from_projected_scale,
    box3d_from_label,
    giou_2d,
    iou_2d,
    iou_3d,
    iou_bev,
    project_point,
)
from .kitti_io import (
    CameraCalib,
    Difficulty,
    ObjectLabel,
    StereoFrame,
    classify_difficulty,
    load_stereo_frame,
    parse_calib_file,
    parse_label_file,
    preprocess_pair,
    serialize_labels,
)
from .stereo_core import (
    ConvParams,
    DecoderWeights,
    InvertedResidual,
    MsfConfig,
    MsfWeights,
    conv_affine_forward,
    correlation_volume,
    decoder_forward,
    inverted_residual_forward,
    msf_forward,
    upsample_nearest,
)
from .depth_label import (
    BinTargetMap,
    DepthBinSpec,
    ObjectDepthMap,
    SamplePoint,
    bin_target_map,
    center_sample_point,
    grid_sample_bilinear,
    grid_sample_gradients,
    lid_bin_centers,
    lid_bin_edges,
    lid_decode,
    lid_encode,
    max_vertical_span_rectangle,
    render_object_depth_map,
    sample_object_depth,
    visible_sample_point,
)
from .matching import (
    Assignment,
    FocalParams,
    MatchProblem,
    focal_class_cost,
    hungarian,
    match_cost_matrix,
    match_predictions,
)
from .losses import (
    DepthPrediction,
    LossBreakdown,
    OrientationPrediction,
    depth_map_loss,
    depth_uncertainty_loss,
    disparity_loss,
    focal_loss,
    orientation_bin_targets,
    orientation_loss,
    regression_2d_loss,
    regression_3d_loss,
    total_loss,
)
from .evaluation import (
    APResult,
    Detection,
    ap_r40,
    evaluate_benchmark,
    evaluate_frames,
    format_ap_table,
    match_frame,
)
from .disparity_bm import DisparityMap, block_match, downsample_disparity
