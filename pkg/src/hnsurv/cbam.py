"""Convolutional block attention for 3D feature maps.

Channel gating first, then spatial gating of the channel-gated map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import BadReduction, EvenKernel, ShapeMismatch
from .nn import Module, he_uniform
from .tensor import Tensor


class ChannelAttention(Module):
    """Shared bias-free MLP C -> C/r -> C over avg- and max-pooled descriptors."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 dtype=np.float64):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise BadReduction(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.channels = channels
        self.w1 = he_uniform(rng, (hidden, channels), channels, dtype)
        self.w2 = he_uniform(rng, (channels, hidden), hidden, dtype)

    def mlp(self, d: Tensor) -> Tensor:
        h = T.relu(T.matmul(d, T.transpose(self.w1)))
        return T.matmul(h, T.transpose(self.w2))

    def forward(self, F: Tensor) -> Tensor:
        return channel_attention(self, F)


def channel_attention(ca: ChannelAttention, F: Tensor) -> Tensor:
    if F.ndim != 5 or F.shape[1] != ca.channels:
        raise ShapeMismatch(f"channel attention expects [N,{ca.channels},D,H,W], got {F.shape}")
    avg = ca.mlp(T.global_pool("avg", F))
    mx = ca.mlp(T.global_pool("max", F))
    return T.sigmoid(T.add(avg, mx))


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, kernel: int = 3, dtype=np.float64):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise EvenKernel(f"spatial attention kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.weight = he_uniform(rng, (1, 2, kernel, kernel, kernel), 2 * kernel ** 3, dtype)

    def forward(self, F: Tensor) -> Tensor:
        return spatial_attention(self, F)


def spatial_attention(sa: SpatialAttention, F: Tensor) -> Tensor:
    if F.ndim != 5:
        raise ShapeMismatch(f"spatial attention expects [N,C,D,H,W], got {F.shape}")
    n, _, d, h, w = F.shape
    avg = T.reshape(T.reduce("mean", F, axis=1), (n, 1, d, h, w))
    mx = T.reshape(T.reduce("max", F, axis=1), (n, 1, d, h, w))
    desc = T.concat([avg, mx], axis=1)
    return T.sigmoid(T.conv3d(desc, sa.weight, None, 1, (sa.kernel - 1) // 2))


class CbamBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 kernel: int = 3, dtype=np.float64):
        super().__init__()
        self.channel = ChannelAttention(channels, rng, reduction, dtype)
        self.spatial = SpatialAttention(rng, kernel, dtype)

    def forward(self, F: Tensor) -> Tensor:
        return cbam_forward(self, F)


def cbam_forward(blk: CbamBlock, F: Tensor) -> Tensor:
    n, c = F.shape[:2]
    gate_c = T.broadcast_to(T.reshape(channel_attention(blk.channel, F), (n, c, 1, 1, 1)), F.shape)
    Fc = T.mul(F, gate_c)
    gate_s = T.broadcast_to(spatial_attention(blk.spatial, Fc), F.shape)
    return T.mul(Fc, gate_s)
