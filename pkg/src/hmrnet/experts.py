"""Shared backbone and the global/local expert pools."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .nn import ConvBlock, Module
from .tensor import Tensor

FEATURE_CHANNELS = 32
NUM_GLOBAL_EXPERTS = 6
NUM_LOCAL_EXPERTS = 8


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


class Backbone(Module):
    """Three conv blocks 3->16->32->C with 2x average downsampling after blocks 1 and 2."""

    def __init__(self, rng: np.random.Generator, channels: int = FEATURE_CHANNELS):
        self.channels = channels
        self.blocks = [ConvBlock(rng, 3, 16), ConvBlock(rng, 16, 32), ConvBlock(rng, 32, channels)]

    def __call__(self, image: Tensor, training: bool = True) -> Tensor:
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"backbone input extents must be multiples of 4, got {(h, w)}")
        if image.shape[-3] != 3:
            raise DimensionError(f"backbone expects 3 input channels, got {image.shape[-3]}")
        x, squeeze = _batched(image)
        x = self.blocks[0](x, training)
        x = T.avg_pool2(x)
        x = self.blocks[1](x, training)
        x = T.avg_pool2(x)
        x = self.blocks[2](x, training)
        return T.reshape(x, x.shape[1:]) if squeeze else x

    def expected_parameters(self) -> int:
        return ConvBlock.count(3, 16) + ConvBlock.count(16, 32) + ConvBlock.count(32, self.channels)


class Expert(Module):
    """Three shape-preserving conv blocks C -> C -> C -> C'."""

    def __init__(self, rng: np.random.Generator, channels: int = FEATURE_CHANNELS, out_channels: int | None = None):
        out_channels = channels if out_channels is None else out_channels
        self.blocks = [ConvBlock(rng, channels, channels), ConvBlock(rng, channels, channels),
                       ConvBlock(rng, channels, out_channels)]

    def __call__(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        x, squeeze = _batched(x)
        for block in self.blocks:
            x = block(x, training, update_stats)
        return T.reshape(x, x.shape[1:]) if squeeze else x

    def identity_init(self, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> None:
        """Make every block pass a non-negative input with these channel stats through unchanged.

        Kernels become per-channel deltas and the batch-norm affine undoes the
        normalization, so the expert starts as (approximately) the identity.
        """
        c = mean.shape[0]
        for block in self.blocks:
            if block.kernel.shape[:2] != (c, c):
                raise DimensionError("identity init needs square blocks")
            block.kernel.data[...] = 0.0
            block.kernel.data[np.arange(c), np.arange(c), 1, 1] = 1.0
            block.scale.data[...] = np.sqrt(var + eps)
            block.shift.data[...] = mean


class ExpertPool(Module):
    """A fixed-size pool of identically shaped, independently initialized experts."""

    def __init__(self, rng: np.random.Generator, role: str, count: int, channels: int = FEATURE_CHANNELS):
        if role not in ("global", "local"):
            raise ValidationError(f"unknown expert role {role!r}")
        self.role = role
        self.count = count
        self.channels = channels
        self.experts = [Expert(rng, channels) for _ in range(count)]

    def expert_parameters(self, index: int) -> list[Tensor]:
        return self.experts[index].parameters()

    def copy_expert(self, source: int, target: int) -> None:
        src, dst = self.experts[source], self.experts[target]
        for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
            b.data[...] = a.data
        for (_, a), (_, b) in zip(src.batch_norm_states(), dst.batch_norm_states()):
            b.running_mean[...] = a.running_mean
            b.running_var[...] = a.running_var
            b.initialized = a.initialized

    def expected_parameters(self) -> int:
        return self.count * 3 * ConvBlock.count(self.channels, self.channels)


def expert_forward(pool: ExpertPool, index: int, features: Tensor, training: bool = True,
                   update_stats: bool = True) -> Tensor:
    """Apply expert ``index`` of ``pool``; only its parameters enter the graph."""
    if not 0 <= index < pool.count:
        raise ValidationError(f"expert index {index} out of range for a pool of {pool.count}")
    if features.shape[-3] != pool.channels:
        raise DimensionError(f"expert expects {pool.channels} channels, got {features.shape[-3]}")
    return pool.experts[index](features, training, update_stats)


def backbone_forward(backbone: Backbone, image: Tensor, training: bool = True) -> Tensor:
    return backbone(image, training)
