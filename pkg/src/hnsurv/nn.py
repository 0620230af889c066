"""Trainable layers and the volumetric / clinical encoders."""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, InputTooSmall, ShapeMismatch
from .tensor import Tensor


class Module:
    """Minimal container: parameters are ``requires_grad`` Tensor attributes,
    buffers are numpy arrays named in ``_buffers``, children are Module
    attributes or lists of Modules. Iteration follows attribute order."""

    _buffers: tuple = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(val, dict):
                for k, v in val.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: np.array(b, copy=True) for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise ShapeMismatch(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: expected {p.shape}, got {state[k].shape}")
        self._load(state, "")

    def _load(self, state: dict[str, np.ndarray], prefix: str) -> None:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                val.data = np.array(state[prefix + name], dtype=val.dtype)
        for name in self._buffers:
            old = getattr(self, name)
            setattr(self, name, np.array(state[prefix + name], dtype=old.dtype))
        for name, child in list(self.children()):
            child._load(state, f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor._wrap(rng.uniform(-bound, bound, size=shape).astype(dtype), True)


def _param_zeros(shape, dtype) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype), True)


def _param_ones(shape, dtype) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype), True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = _param_zeros((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    """x @ W.T + b with the bias row explicitly broadcast over the batch."""
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeMismatch(f"linear expects [N,{layer.in_features}], got {x.shape}")
    out = T.matmul(x, T.transpose(layer.weight))
    if layer.bias is None:
        return out
    b = T.broadcast_to(T.reshape(layer.bias, (1, layer.out_features)), out.shape)
    return T.add(out, b)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel ** 3
        self.weight = he_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in, dtype)
        self.bias = _param_zeros((out_ch,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(Module):
    """Batch normalisation over (N, D, H, W) per channel.

    Running variance is tracked with the unbiased estimator.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum, self.eps = momentum, eps
        self.gamma = _param_ones((channels,), dtype)
        self.beta = _param_zeros((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(self, x)


def batchnorm_forward(bn: BatchNorm3d, x: Tensor) -> Tensor:
    if x.ndim != 5 or x.shape[1] != bn.gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm expects [N,{bn.gamma.shape[0]},D,H,W], got {x.shape}")
    if not bn.training:
        out, _, _ = T.batch_norm(x, bn.gamma, bn.beta, bn.eps, bn.running_mean, bn.running_var)
        return out
    m = x.size // x.shape[1]
    if m < 2:
        raise DegenerateBatch(f"train-mode batch norm needs >= 2 values per channel, got {m}")
    out, mu, var = T.batch_norm(x, bn.gamma, bn.beta, bn.eps)
    mom = bn.momentum
    bn.running_mean = (1 - mom) * bn.running_mean + mom * mu
    bn.running_var = (1 - mom) * bn.running_var + mom * var * (m / (m - 1))
    return out


class ResidualBlock(Module):
    """Two 3x3x3 conv + BN stages with an identity or 1x1x1 projection skip."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1,
                 dtype=np.float64):
        super().__init__()
        self.conv1 = Conv3d(in_ch, out_ch, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm3d(out_ch, dtype=dtype)
        self.conv2 = Conv3d(out_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm3d(out_ch, dtype=dtype)
        self.proj = None
        if in_ch != out_ch or stride != 1:
            self.proj = Conv3d(in_ch, out_ch, 1, rng, stride=stride, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        main = T.relu(self.bn1(self.conv1(x)))
        main = self.bn2(self.conv2(main))
        skip = x if self.proj is None else self.proj(x)
        return T.relu(T.add(main, skip))


class VolumeEncoder(Module):
    """Stem (7^3 conv stride 2, BN, ReLU, 2^3 max-pool), residual stages,
    optional attention on the last feature map, global average pool and a
    linear projection to the embedding width."""

    def __init__(self, widths: Sequence[int], depths: Sequence[int], embedding: int,
                 rng: np.random.Generator, attention: Optional[Module] = None,
                 min_input: int = 16, in_channels: int = 1, dtype=np.float64):
        super().__init__()
        if len(widths) != len(depths) or not widths:
            raise ValueError("widths and depths must be non-empty and equally long")
        self.min_input = min_input
        self.stem = Conv3d(in_channels, widths[0], 7, rng, stride=2, padding=3, dtype=dtype)
        self.stem_bn = BatchNorm3d(widths[0], dtype=dtype)
        blocks = []
        prev = widths[0]
        for s, (w, n) in enumerate(zip(widths, depths)):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(prev, w, rng, stride=stride, dtype=dtype))
                prev = w
        self.blocks = blocks
        self.attention = attention
        self.proj = Linear(prev, embedding, rng, dtype=dtype)
        self.embedding = embedding

    def features(self, x: Tensor) -> Tensor:
        h = T.relu(self.stem_bn(self.stem(x)))
        h = T.pool3d("max", h, 2, 2)
        for blk in self.blocks:
            h = blk(h)
        if self.attention is not None:
            h = self.attention(h)
        return h

    def forward(self, x: Tensor) -> Tensor:
        return encode_volume(self, x)


def encode_volume(enc: VolumeEncoder, x: Tensor) -> Tensor:
    if x.ndim != 5 or x.shape[1] != enc.stem.weight.shape[1]:
        raise ShapeMismatch(f"volume encoder expects [N,1,D,H,W], got {x.shape}")
    if min(x.shape[2:]) < enc.min_input:
        raise InputTooSmall(f"spatial extents {x.shape[2:]} below minimum {enc.min_input}")
    return enc.proj(T.global_pool("avg", enc.features(x)))


class ClinicalEncoder(Module):
    """Linear layers, each followed by ReLU, mapping f features to width m."""

    def __init__(self, n_features: int, embedding: int, rng: np.random.Generator,
                 hidden: Optional[Sequence[int]] = None, dtype=np.float64):
        super().__init__()
        sizes = [n_features, *(hidden if hidden is not None else [2 * embedding]), embedding]
        self.n_features = n_features
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        return encode_clinical(self, x)


def encode_clinical(enc: ClinicalEncoder, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != enc.n_features:
        raise ShapeMismatch(f"clinical encoder expects [N,{enc.n_features}], got {x.shape}")
    h = x
    for layer in enc.layers:
        h = T.relu(layer(h))
    return h
