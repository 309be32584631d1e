"""Local relation aggregator: a small convolutional branch at token resolution.

Each block applies three residual sub-steps to an (N, C, T, H, W) map:
a depthwise 3x3x3 conv, a relation-aggregation bottleneck whose 5x5x5
middle conv is grouped per channel, and a pointwise MLP with expansion 4.
All sub-steps use same padding, so block shape is preserved exactly.
The full branch downsamples a clip through two stages and emits a map
matching the patch-token grid, to be summed with the embedded tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DimensionError
from .nn import Conv3d, LayerNorm, Module
from .tensor import Tensor


@dataclass(frozen=True)
class LraStageConfig:
    depths: Tuple[int, ...] = (5, 8)
    channels: Tuple[int, ...] = (320, 768)
    stem_stride: Tuple[int, int, int] = (2, 4, 4)
    inter_stride: Tuple[int, int, int] = (1, 4, 4)

    def __post_init__(self):
        if len(self.depths) != 2 or len(self.channels) != 2:
            raise ConfigError("expected exactly two stages")
        if any(d < 0 for d in self.depths) or any(c < 1 for c in self.channels):
            raise ConfigError(f"bad stage plan {self.depths} / {self.channels}")


class RelationAggregation(Module):
    """1x1x1 conv -> per-channel 5x5x5 conv -> 1x1x1 conv, channels constant."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        self.reduce = Conv3d(channels, channels, 1, rng, dtype=dtype)
        self.local = Conv3d(channels, channels, 5, rng, padding="same",
                            groups=channels, dtype=dtype)
        self.expand = Conv3d(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.expand(self.local(self.reduce(x)))


class LraBlock(Module):
    """Three residual sub-steps; norms take channel statistics per position."""

    def __init__(self, channels: int, rng, mlp_ratio: int = 4, dtype=np.float32):
        self.dw = Conv3d(channels, channels, 3, rng, padding="same",
                         groups=channels, dtype=dtype)
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.ra = RelationAggregation(channels, rng, dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)
        self.fc1 = Conv3d(channels, mlp_ratio * channels, 1, rng, dtype=dtype)
        self.fc2 = Conv3d(mlp_ratio * channels, channels, 1, rng, dtype=dtype)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {x.shape[1]}")
        x = x + self.dw(x)
        x = x + self.ra(self.norm1(x, axis=1))
        x = x + self.fc2(tt.gelu(self.fc1(self.norm2(x, axis=1))))
        return x


class LraBranch(Module):
    """Stem conv, stage-1 blocks, inter-stage conv, stage-2 blocks."""

    def __init__(self, cfg: LraStageConfig, rng, in_channels: int = 3,
                 mlp_ratio: int = 4, dtype=np.float32):
        self.cfg = cfg
        c1, c2 = cfg.channels
        self.stem = Conv3d(in_channels, c1, cfg.stem_stride, rng,
                           stride=cfg.stem_stride, dtype=dtype)
        self.stage1 = [LraBlock(c1, rng, mlp_ratio, dtype) for _ in range(cfg.depths[0])]
        self.inter = Conv3d(c1, c2, cfg.inter_stride, rng,
                            stride=cfg.inter_stride, dtype=dtype)
        self.stage2 = [LraBlock(c2, rng, mlp_ratio, dtype) for _ in range(cfg.depths[1])]

    def output_grid(self, t: int, h: int, w: int):
        dims = (t, h, w)
        for stride in (self.cfg.stem_stride, self.cfg.inter_stride):
            if any(d % s for d, s in zip(dims, stride)):
                raise ConfigError(f"clip dims {(t, h, w)} not divisible by strides")
            dims = tuple(d // s for d, s in zip(dims, stride))
        return dims

    def __call__(self, clip: Tensor, grid=None) -> Tensor:
        """clip (N, 3, T, H, W) -> token-layout map (N, T', Gh, Gw, C)."""
        out_dims = self.output_grid(*clip.shape[2:])
        if grid is not None and tuple(grid) != out_dims:
            raise ConfigError(f"branch resolution {out_dims} != token grid {tuple(grid)}")
        x = self.stem(clip)
        for blk in self.stage1:
            x = blk(x)
        x = self.inter(x)
        for blk in self.stage2:
            x = blk(x)
        return x.transpose(0, 2, 3, 4, 1)
