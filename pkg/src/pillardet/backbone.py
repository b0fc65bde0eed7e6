"""Multi-scale convolutional backbone with scale-attentive refinement.

Three stride-2 blocks take the pseudo image to 1/2, 1/4, and 1/8 resolution
at widths (C, 2C, 4C). A parallel pyramid built from per-pillar 3D scale
descriptors produces spatial attention gates (channel max + mean pooled,
7x7 conv, sigmoid) that refine each level as F + A * F. The three refined
levels are upsampled back to 1/2 resolution and concatenated into a 6C map.
"""

from __future__ import annotations

import numpy as np

from . import difftensor as dt
from .difftensor import nn
from .difftensor import tensor as T
from .pillars import GridSpec, PillarBatch, scatter_to_image

SCALE_FEATURE_DIM = 5


class ConvUnit(nn.Module):
    """3x3 conv + batch norm + ReLU."""

    def __init__(self, name: str, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.conv = nn.Conv2d(name + ".conv", cin, cout, 3, rng, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(name + ".bn", cout)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return dt.tensor.relu(self.bn(self.conv(x)))


class ConvBlock(nn.Module):
    """One strided unit followed by depth-1 stride-1 units."""

    def __init__(self, name: str, cin: int, cout: int, depth: int, rng: np.random.Generator):
        if depth < 1:
            raise ValueError("block depth must be >= 1")
        self.units = [ConvUnit(f"{name}.u0", cin, cout, 2, rng)]
        self.units += [ConvUnit(f"{name}.u{i}", cout, cout, 1, rng) for i in range(1, depth)]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class Backbone(nn.Module):
    """Three downsampling blocks; returns the per-level feature maps."""

    def __init__(self, name: str, in_channels: int, base_channels: int, depth: int,
                 rng: np.random.Generator):
        c = base_channels
        self.level_channels = (c, 2 * c, 4 * c)
        self.blocks = [
            ConvBlock(f"{name}.b0", in_channels, c, depth, rng),
            ConvBlock(f"{name}.b1", c, 2 * c, depth, rng),
            ConvBlock(f"{name}.b2", 2 * c, 4 * c, depth, rng),
        ]

    def __call__(self, image: T.Tensor) -> list[T.Tensor]:
        _, h, w = image.shape
        if h % 8 or w % 8:
            raise ValueError(f"image extents ({h}, {w}) must be divisible by 8")
        feats = []
        x = image
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def scale_descriptors(batch: PillarBatch,
                      origin: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Per-pillar 3D scale summary: point count, centroid (x, y, z), and the
    centroid's distance from the sensor origin. Shape (N, 5)."""
    n = batch.n_pillars
    out = np.zeros((n, SCALE_FEATURE_DIM))
    if n == 0:
        return out
    counts = batch.counts.astype(np.float64)
    valid = np.arange(batch.raw.shape[1])[None, :] < batch.counts[:, None]
    centroid = (batch.raw[:, :, :3] * valid[:, :, None]).sum(axis=1) / counts[:, None]
    out[:, 0] = counts
    out[:, 1:4] = centroid
    out[:, 4] = np.linalg.norm(centroid - np.asarray(origin, dtype=np.float64), axis=1)
    return out


class ScaleFeatureNet(nn.Module):
    """Embed scale descriptors and scatter them into a (C, H, W) map."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator):
        self.linear = nn.Linear(f"{name}.linear", SCALE_FEATURE_DIM, channels, rng)

    def __call__(self, batch: PillarBatch, grid: GridSpec) -> T.Tensor:
        desc = T.Tensor(scale_descriptors(batch))
        cols = dt.tensor.transpose(dt.tensor.relu(self.linear(desc)), (1, 0))
        return scatter_to_image(cols, batch.coords, grid)


class ScalePyramid(nn.Module):
    """Downsample the scale map to the three backbone resolutions."""

    def __init__(self, name: str, base_channels: int, rng: np.random.Generator):
        c = base_channels
        self.stages = [
            ConvUnit(f"{name}.s0", c, c, 2, rng),
            ConvUnit(f"{name}.s1", c, 2 * c, 2, rng),
            ConvUnit(f"{name}.s2", 2 * c, 4 * c, 2, rng),
        ]

    def __call__(self, scale_map: T.Tensor) -> list[T.Tensor]:
        maps = []
        x = scale_map
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


class AttentionGate(nn.Module):
    """Spatial attention from channel statistics: per-cell max and mean are
    stacked and convolved (7x7, padding 3) to one sigmoid-gated channel."""

    def __init__(self, name: str, rng: np.random.Generator, kernel: int = 7):
        self.conv = nn.Conv2d(f"{name}.conv", 2, 1, kernel, rng, stride=1,
                              padding=kernel // 2)

    def __call__(self, source: T.Tensor) -> T.Tensor:
        mx = dt.tensor.max_(source, axis=0, keepdims=True)
        mn = dt.tensor.mean_(source, axis=0, keepdims=True)
        pooled = dt.tensor.concat([mx, mn], axis=0)
        return dt.tensor.sigmoid(self.conv(pooled))


def refine(features: T.Tensor, attention: T.Tensor) -> T.Tensor:
    """Residually apply an attention map: F + A * F."""
    if attention.shape[0] != 1 or attention.shape[1:] != features.shape[1:]:
        raise ValueError(f"attention {attention.shape} does not match {features.shape}")
    return dt.tensor.add(features, dt.tensor.mul(attention, features))


class ScaleAttentiveFusion(nn.Module):
    """Gate each backbone level, upsample everything to 1/2 resolution, and
    concatenate into one 6C-channel map for the detection head.

    When no scale pyramid is supplied the gates read the backbone features
    themselves, which keeps the attention path usable without the
    descriptor stream.
    """

    def __init__(self, name: str, base_channels: int, rng: np.random.Generator,
                 attention: bool = True, levels: int = 3):
        if levels < 1:
            raise ValueError("fusion needs at least one level")
        c = base_channels
        self.attention = attention
        self.levels = levels
        self.out_channels = 2 * c * levels
        if attention:
            self.gates = [AttentionGate(f"{name}.gate{i}", rng) for i in range(levels)]
        self.up = [
            nn.ConvTranspose2d(f"{name}.up{i}", c * 2 ** i, 2 * c, 2 ** i, rng)
            for i in range(levels)
        ]
        self.up_bn = [nn.BatchNorm2d(f"{name}.upbn{i}", 2 * c) for i in range(levels)]

    def __call__(self, level_feats: list[T.Tensor],
                 scale_maps: list[T.Tensor] | None = None) -> T.Tensor:
        if len(level_feats) != self.levels:
            raise ValueError(f"expected {self.levels} backbone levels")
        outs = []
        for i, feats in enumerate(level_feats):
            x = feats
            if self.attention:
                source = scale_maps[i] if scale_maps is not None else feats
                if source.shape[1:] != feats.shape[1:]:
                    raise ValueError(f"scale map {source.shape} misaligned with "
                                     f"level {feats.shape}")
                x = refine(x, self.gates[i](source))
            x = dt.tensor.relu(self.up_bn[i](self.up[i](x)))
            outs.append(x)
        return dt.tensor.concat(outs, axis=0)
