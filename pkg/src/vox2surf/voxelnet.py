"""Volumetric encoder/decoder producing a coarse-to-fine feature pyramid and
a two-channel segmentation head.

The layout is a compact U-Net: per-level 3x3x3 convolutions, stride-2
convolutions on the way down, nearest-neighbor doubling plus convolution on
the way up, skip concatenation at matching resolutions. No normalization
layers; every hidden activation is a leaky rectifier with slope 0.01.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class VoxelNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    def channels(self, level: int) -> int:
        """Feature width at resolution level 1 (finest) .. levels (coarsest)."""
        return self.base_channels * (2 ** (level - 1))


@dataclass
class VoxelFeaturePyramid:
    """Feature cubes ordered coarse to fine; extents double stage to stage."""
    stages: list[Tensor]


@dataclass
class SegmentationOutput:
    logits: Tensor  # [2, D, H, W], background channel 0 / foreground channel 1


def _conv_layout(config: VoxelNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every convolution."""
    c = config.channels
    layers = [("enc1", config.in_channels, c(1), 3)]
    for l in range(2, config.levels + 1):
        layers.append((f"down{l}", c(l - 1), c(l), 3))
    layers.append(("bottom", c(config.levels), c(config.levels), 3))
    for l in range(config.levels - 1, 0, -1):
        layers.append((f"up{l}", c(l + 1) + c(l), c(l), 3))
    layers.append(("head", c(1), 2, 1))
    return layers


def init_params(config: VoxelNetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kernel entries uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    dtype = nd.default_dtype()
    params: dict[str, Tensor] = {}
    for name, cin, cout, k in _conv_layout(config):
        fan_in = cin * k ** 3
        fan_out = cout * k ** 3
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        kernel = rng.uniform(-bound, bound, size=(cout, cin, k, k, k))
        params[f"{name}.kernel"] = Tensor(kernel.astype(dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return params


def _conv(x: Tensor, params: dict[str, Tensor], name: str,
          stride: int = 1, padding: int = 1) -> Tensor:
    return nd.conv3d(x, params[f"{name}.kernel"], params[f"{name}.bias"],
                     stride=stride, padding=padding)


def encode_decode(volume: Tensor, params: dict[str, Tensor],
                  config: VoxelNetConfig) -> tuple[VoxelFeaturePyramid, SegmentationOutput]:
    """Run the full encoder/decoder.

    Returns the pyramid (stage l extent = input extent / 2^(levels-l), stage 1
    coarsest) and full-resolution logits.
    """
    if volume.ndim != 4 or volume.shape[0] != config.in_channels:
        raise ValueError(
            f"expected volume [{config.in_channels},D,H,W], got {volume.shape}")
    divisor = 2 ** (config.levels - 1)
    d, h, w = volume.shape[1:]
    if d % divisor or h % divisor or w % divisor:
        raise ValueError(
            f"spatial extents {(d, h, w)} must be divisible by {divisor} "
            f"for levels={config.levels}")

    x = nd.leaky_relu(_conv(volume, params, "enc1"), LEAKY_SLOPE)
    skips = [x]
    for l in range(2, config.levels + 1):
        x = nd.leaky_relu(_conv(x, params, f"down{l}", stride=2), LEAKY_SLOPE)
        if l < config.levels:
            skips.append(x)

    x = nd.leaky_relu(_conv(x, params, "bottom"), LEAKY_SLOPE)
    stages = [x]
    for l in range(config.levels - 1, 0, -1):
        x = nd.upsample_nearest2(x)
        x = nd.concat([x, skips[l - 1]], axis=0)
        x = nd.leaky_relu(_conv(x, params, f"up{l}"), LEAKY_SLOPE)
        stages.append(x)

    logits = _conv(stages[-1], params, "head", padding=0)
    return VoxelFeaturePyramid(stages), SegmentationOutput(logits)


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())
