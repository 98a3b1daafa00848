"""Weight storage: concatenated little-endian float32 arrays + JSON manifest.

The binary file is nothing but the arrays' raw bytes in manifest order; the
manifest records names and shapes.  Structural parameters (stride, padding,
activation, grouping) are not serialized; the *_from_arrays reconstructors
know the architecture and reapply them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .stereo_core import (
    ConvParams,
    DecoderWeights,
    InvertedResidual,
    MsfConfig,
    MsfWeights,
)

_DTYPE = "float32"
_BYTE_ORDER = "little"


class WeightFormatError(ValueError):
    pass


def save_weight_arrays(arrays: dict[str, np.ndarray], bin_path, manifest_path) -> None:
    """Write arrays to a flat binary plus manifest; dict order is file order."""
    entries = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    Path(bin_path).write_bytes(b"".join(chunks))
    manifest = {"byte_order": _BYTE_ORDER, "dtype": _DTYPE, "arrays": entries}
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_weight_arrays(bin_path, manifest_path) -> dict[str, np.ndarray]:
    """Inverse of :func:`save_weight_arrays`; validates sizes exactly."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("dtype") != _DTYPE or manifest.get("byte_order") != _BYTE_ORDER:
        raise WeightFormatError(
            f"unsupported container encoding: {manifest.get('dtype')}/"
            f"{manifest.get('byte_order')}"
        )
    blob = Path(bin_path).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["arrays"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise WeightFormatError(f"binary too short for array {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise WeightFormatError(
            f"{len(blob) - offset} trailing bytes not covered by the manifest"
        )
    return arrays


def conv_to_arrays(prefix: str, p: ConvParams) -> dict[str, np.ndarray]:
    out = {f"{prefix}.kernels": p.kernels, f"{prefix}.bias": p.bias}
    if p.scale is not None:
        out[f"{prefix}.scale"] = p.scale
        out[f"{prefix}.shift"] = p.shift
    return out


def conv_from_arrays(
    prefix: str,
    arrays: dict[str, np.ndarray],
    stride: int = 1,
    activation: str = "none",
    groups: int = 1,
    padding: int | None = None,
) -> ConvParams:
    try:
        kernels = arrays[f"{prefix}.kernels"]
        bias = arrays[f"{prefix}.bias"]
    except KeyError as exc:
        raise WeightFormatError(f"missing weight array {exc}") from None
    if padding is None:
        padding = kernels.shape[2] // 2
    return ConvParams(
        kernels=kernels,
        bias=bias,
        stride=stride,
        padding=padding,
        activation=activation,
        scale=arrays.get(f"{prefix}.scale"),
        shift=arrays.get(f"{prefix}.shift"),
        groups=groups,
    )


def _block_to_arrays(prefix: str, block: InvertedResidual) -> dict[str, np.ndarray]:
    out = {}
    if block.expand is not None:
        out.update(conv_to_arrays(f"{prefix}.expand", block.expand))
    out.update(conv_to_arrays(f"{prefix}.depthwise", block.depthwise))
    out.update(conv_to_arrays(f"{prefix}.project", block.project))
    return out


def _block_from_arrays(prefix: str, arrays, stride: int) -> InvertedResidual:
    expand = None
    if f"{prefix}.expand.kernels" in arrays:
        expand = conv_from_arrays(f"{prefix}.expand", arrays, activation="relu6")
    dw_kernels = arrays.get(f"{prefix}.depthwise.kernels")
    if dw_kernels is None:
        raise WeightFormatError(f"missing depthwise kernels under {prefix!r}")
    depthwise = conv_from_arrays(
        f"{prefix}.depthwise",
        arrays,
        stride=stride,
        activation="relu6",
        groups=dw_kernels.shape[0],
    )
    project = conv_from_arrays(f"{prefix}.project", arrays, activation="none")
    return InvertedResidual(expand=expand, depthwise=depthwise, project=project)


def msf_weights_to_arrays(w: MsfWeights, prefix: str = "msf") -> dict[str, np.ndarray]:
    out = {}
    out.update(_block_to_arrays(f"{prefix}.block1", w.block1))
    out.update(_block_to_arrays(f"{prefix}.block2", w.block2))
    out.update(conv_to_arrays(f"{prefix}.fuse", w.fuse))
    return out


def msf_weights_from_arrays(arrays, prefix: str = "msf") -> MsfWeights:
    return MsfWeights(
        block1=_block_from_arrays(f"{prefix}.block1", arrays, stride=2),
        block2=_block_from_arrays(f"{prefix}.block2", arrays, stride=2),
        fuse=conv_from_arrays(f"{prefix}.fuse", arrays, activation="relu"),
    )


def decoder_weights_to_arrays(w: DecoderWeights, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    out.update(conv_to_arrays(f"{prefix}.conv1", w.conv1))
    out.update(conv_to_arrays(f"{prefix}.conv2", w.conv2))
    return out


def decoder_weights_from_arrays(arrays, prefix: str) -> DecoderWeights:
    return DecoderWeights(
        conv1=conv_from_arrays(f"{prefix}.conv1", arrays, activation="relu"),
        conv2=conv_from_arrays(f"{prefix}.conv2", arrays, activation="relu"),
    )
