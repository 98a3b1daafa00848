"""Stereo correlation volumes and the small conv stack that fuses them.

Everything here is plain numpy, computed in float64 regardless of the stored
weight dtype, so results are deterministic and easy to check against naive
reference loops.  Layout is channels-last (h, w, c) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("none", "relu", "relu6")


def correlation_volume(left_feat: np.ndarray, right_feat: np.ndarray, max_disp: int) -> np.ndarray:
    """Channel-mean dot-product cost volume between rectified feature maps.

    out[y, x, d] = mean_c left[y, x, c] * right[y, x - d, c] for d in
    [0, max_disp).  Disparity shifts along the horizontal axis only; samples
    where x - d falls off the left edge are exactly 0.
    """
    left_feat = np.asarray(left_feat, dtype=np.float64)
    right_feat = np.asarray(right_feat, dtype=np.float64)
    if left_feat.ndim != 3 or left_feat.shape != right_feat.shape:
        raise ValueError(
            f"feature maps must share an (h, w, c) shape, got "
            f"{left_feat.shape} vs {right_feat.shape}"
        )
    if max_disp < 1:
        raise ValueError(f"max_disp must be >= 1, got {max_disp}")
    h, w, c = left_feat.shape
    out = np.zeros((h, w, max_disp), dtype=np.float64)
    for d in range(min(max_disp, w)):
        out[:, d:, d] = (
            np.einsum("hwc,hwc->hw", left_feat[:, d:, :], right_feat[:, : w - d, :]) / c
        )
    return out


@dataclass
class ConvParams:
    """One conv layer: kernels, bias, frozen per-channel affine, activation.

    kernels has shape (out_c, in_c // groups, k, k) with odd k.  The affine
    (scale, shift) pair plays the role of folded batch-norm statistics and is
    applied after the bias, before the activation.
    """

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "none"
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    groups: int = 1

    def __post_init__(self) -> None:
        self.kernels = np.asarray(self.kernels)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ValueError(f"kernels must be (out, in/g, k, k), got {self.kernels.shape}")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.groups < 1 or self.out_channels % self.groups != 0:
            raise ValueError(
                f"groups {self.groups} must divide out channels {self.out_channels}"
            )
        self.bias = np.asarray(self.bias)
        if self.bias.shape != (self.out_channels,):
            raise ValueError(
                f"bias must have shape ({self.out_channels},), got {self.bias.shape}"
            )
        if (self.scale is None) != (self.shift is None):
            raise ValueError("scale and shift must be given together")
        if self.scale is not None:
            self.scale = np.asarray(self.scale).reshape(self.out_channels)
            self.shift = np.asarray(self.shift).reshape(self.out_channels)

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]


def _apply_activation(x: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "relu6":
        return np.clip(x, 0.0, 6.0)
    return x


def conv_output_hw(in_hw: tuple[int, int], k: int, stride: int, padding: int) -> tuple[int, int]:
    h, w = in_hw
    return ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)


def conv_affine_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """2D cross-correlation + bias + affine + activation, computed in float64.

    x is (h, w, in_c); output is (h', w', out_c) with the usual
    (h + 2p - k) // stride + 1 spatial rule.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (h, w, c), got {x.shape}")
    if x.shape[2] != params.in_channels:
        raise ValueError(
            f"input has {x.shape[2]} channels, conv expects {params.in_channels}"
        )
    k = params.kernel_size
    pad = params.padding
    if x.shape[0] + 2 * pad < k or x.shape[1] + 2 * pad < k:
        raise ValueError(f"input {x.shape[:2]} too small for k={k}, pad={pad}")
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(0, 1))[:: params.stride, :: params.stride]
    kern = np.asarray(params.kernels, dtype=np.float64)
    g = params.groups
    if g == 1:
        out = np.einsum("hwckl,ockl->hwo", win, kern, optimize=True)
    else:
        hh, ww = win.shape[:2]
        cg = params.in_channels // g
        og = params.out_channels // g
        win_g = win.reshape(hh, ww, g, cg, k, k)
        kern_g = kern.reshape(g, og, cg, k, k)
        out = np.einsum("hwgckl,gockl->hwgo", win_g, kern_g, optimize=True)
        out = out.reshape(hh, ww, params.out_channels)
    out = out + np.asarray(params.bias, dtype=np.float64)
    if params.scale is not None:
        out = out * np.asarray(params.scale, dtype=np.float64) + np.asarray(
            params.shift, dtype=np.float64
        )
    return _apply_activation(out, params.activation)


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Integer-factor nearest-neighbor upsampling of an (h, w, c) map."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


@dataclass
class InvertedResidual:
    """Expand (1x1, relu6) -> depthwise (3x3, relu6) -> project (1x1, linear).

    expand may be None for expansion ratio 1.  The residual skip applies only
    when the depthwise stride is 1 and input/output channel counts match.
    """

    expand: ConvParams | None
    depthwise: ConvParams
    project: ConvParams

    def __post_init__(self) -> None:
        mid = self.depthwise.in_channels
        if self.depthwise.groups != mid:
            raise ValueError("depthwise conv must have groups == channels")
        if self.expand is not None and self.expand.out_channels != mid:
            raise ValueError("expand output does not feed depthwise input")
        if self.project.in_channels != self.depthwise.out_channels:
            raise ValueError("depthwise output does not feed projection input")

    @property
    def in_channels(self) -> int:
        return (self.expand or self.depthwise).in_channels

    @property
    def out_channels(self) -> int:
        return self.project.out_channels

    @property
    def stride(self) -> int:
        return self.depthwise.stride

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def inverted_residual_forward(x: np.ndarray, block: InvertedResidual) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    if block.expand is not None:
        out = conv_affine_forward(out, block.expand)
    out = conv_affine_forward(out, block.depthwise)
    out = conv_affine_forward(out, block.project)
    if block.has_skip:
        out = out + x
    return out


@dataclass(frozen=True)
class MsfConfig:
    """Channel plan for fusing cost volumes from 1/4, 1/8, 1/16 resolution.

    Disparity ranges shrink with resolution (a 192 px full-resolution search
    becomes 48/24/12 at the three scales), and the two downsampling blocks
    widen features to mid1/mid2 before the fused projection to out_channels.
    """

    disp_quarter: int = 48
    disp_eighth: int = 24
    disp_sixteenth: int = 12
    mid1: int = 64
    mid2: int = 96
    expand_ratio: int = 4
    out_channels: int = 512


@dataclass
class MsfWeights:
    block1: InvertedResidual
    block2: InvertedResidual
    fuse: ConvParams


@dataclass
class DecoderWeights:
    conv1: ConvParams
    conv2: ConvParams

    def __post_init__(self) -> None:
        for name, p in (("conv1", self.conv1), ("conv2", self.conv2)):
            if p.stride != 1 or p.padding != p.kernel_size // 2:
                raise ValueError(f"{name} must be a stride-1 'same' conv")


def msf_forward(
    cv_quarter: np.ndarray,
    cv_eighth: np.ndarray,
    cv_sixteenth: np.ndarray,
    weights: MsfWeights,
) -> np.ndarray:
    """Fuse three cost volumes into one 1/16-resolution feature map.

    The 1/4 volume is downsampled twice by stride-2 inverted-residual blocks,
    concatenating the matching-scale volume after each step, then projected
    by the fuse conv.  Output is (h/16-grid, w/16-grid, fuse.out_channels).
    """
    cvs = [np.asarray(v, dtype=np.float64) for v in (cv_quarter, cv_eighth, cv_sixteenth)]
    for v in cvs:
        if v.ndim != 3:
            raise ValueError(f"cost volumes must be (h, w, d), got {v.shape}")
    h, w = cvs[0].shape[:2]
    if cvs[1].shape[:2] != (h // 2, w // 2) or cvs[2].shape[:2] != (h // 4, w // 4):
        raise ValueError(
            "cost volume grids must halve per scale: "
            f"{cvs[0].shape[:2]}, {cvs[1].shape[:2]}, {cvs[2].shape[:2]}"
        )
    if h % 4 or w % 4:
        raise ValueError(f"1/4-scale grid {h}x{w} must be divisible by 4")

    x = inverted_residual_forward(cvs[0], weights.block1)
    x = np.concatenate([x, cvs[1]], axis=2)
    x = inverted_residual_forward(x, weights.block2)
    x = np.concatenate([x, cvs[2]], axis=2)
    return conv_affine_forward(x, weights.fuse)


def decoder_forward(
    x: np.ndarray, weights: DecoderWeights, out_channels: int | None = None
) -> np.ndarray:
    """Two rounds of (2x nearest upsample, same conv); total 4x upscaling.

    Used with out_channels=80 for the binned depth head and 96 for the
    disparity head; pass out_channels to assert the head you expect.
    """
    if out_channels is not None and weights.conv2.out_channels != out_channels:
        raise ValueError(
            f"decoder produces {weights.conv2.out_channels} channels, "
            f"expected {out_channels}"
        )
    x = upsample_nearest(x, 2)
    x = conv_affine_forward(x, weights.conv1)
    x = upsample_nearest(x, 2)
    return conv_affine_forward(x, weights.conv2)


def _init_kernels(rng: np.random.Generator, out_c: int, in_cg: int, k: int) -> np.ndarray:
    fan_in = in_cg * k * k
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_c, in_cg, k, k)).astype(
        np.float32
    )


def random_conv_params(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    k: int = 3,
    stride: int = 1,
    activation: str = "relu",
    groups: int = 1,
    affine: bool = True,
) -> ConvParams:
    """Random 'same'-padded conv weights for tests and benchmarks."""
    kernels = _init_kernels(rng, out_channels, in_channels // groups, k)
    bias = rng.normal(0.0, 0.02, size=out_channels).astype(np.float32)
    scale = shift = None
    if affine:
        scale = rng.uniform(0.5, 1.5, size=out_channels).astype(np.float32)
        shift = rng.normal(0.0, 0.1, size=out_channels).astype(np.float32)
    return ConvParams(
        kernels=kernels,
        bias=bias,
        stride=stride,
        padding=k // 2,
        activation=activation,
        scale=scale,
        shift=shift,
        groups=groups,
    )


def random_inverted_residual(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    stride: int,
    expand_ratio: int = 4,
) -> InvertedResidual:
    mid = in_channels * expand_ratio
    expand = None
    if expand_ratio != 1:
        expand = random_conv_params(rng, in_channels, mid, k=1, activation="relu6")
    depthwise = random_conv_params(
        rng, mid, mid, k=3, stride=stride, activation="relu6", groups=mid
    )
    project = random_conv_params(rng, mid, out_channels, k=1, activation="none")
    return InvertedResidual(expand=expand, depthwise=depthwise, project=project)


def random_msf_weights(rng: np.random.Generator, config: MsfConfig = MsfConfig()) -> MsfWeights:
    block1 = random_inverted_residual(
        rng, config.disp_quarter, config.mid1, stride=2, expand_ratio=config.expand_ratio
    )
    block2 = random_inverted_residual(
        rng,
        config.mid1 + config.disp_eighth,
        config.mid2,
        stride=2,
        expand_ratio=config.expand_ratio,
    )
    fuse = random_conv_params(
        rng, config.mid2 + config.disp_sixteenth, config.out_channels, k=3
    )
    return MsfWeights(block1=block1, block2=block2, fuse=fuse)


def random_decoder_weights(
    rng: np.random.Generator,
    in_channels: int = 512,
    mid_channels: int = 128,
    out_channels: int = 80,
) -> DecoderWeights:
    conv1 = random_conv_params(rng, in_channels, mid_channels, k=3)
    conv2 = random_conv_params(rng, mid_channels, out_channels, k=3)
    return DecoderWeights(conv1=conv1, conv2=conv2)
